"""Plot and table emission for a completed run."""

from __future__ import annotations

import os
import shutil

import matplotlib
import numpy as np

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from . import pipeline  # noqa: E402
from .tables import read_table  # noqa: E402


def _save_fig(fig, path):
    tmp = os.fspath(path) + ".tmp"
    fig.savefig(tmp, format="svg")
    os.replace(tmp, path)
    plt.close(fig)


def _heatmap(path, matrix, labels, title, cmap="viridis", symmetric=False):
    fig, ax = plt.subplots(figsize=(7, 6))
    if symmetric:
        bound = float(np.abs(matrix).max()) or 1.0
        im = ax.imshow(matrix, cmap="RdBu_r", vmin=-bound, vmax=bound)
    else:
        im = ax.imshow(matrix, cmap=cmap)
    ax.set_xticks(range(len(labels)), labels, rotation=90, fontsize=6)
    ax.set_yticks(range(len(labels)), labels, fontsize=6)
    ax.set_title(title)
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    _save_fig(fig, path)


def _mds_scatter(path, coords, rep_ids, groups):
    fig, ax = plt.subplots(figsize=(7, 6))
    unique_groups = sorted(set(groups.values()))
    cmap = plt.get_cmap("tab10")
    for g_idx, group in enumerate(unique_groups):
        members = [i for i, rid in enumerate(rep_ids) if groups[rid] == group]
        xs = coords[members, 0]
        ys = coords[members, 1] if coords.shape[1] > 1 else np.zeros(len(members))
        color = cmap(g_idx % 10)
        ax.scatter(xs, ys, label=group, color=color, s=30)
        if len(members) > 1:  # layer trajectory within one model group
            ax.plot(xs, ys, color=color, alpha=0.4, linewidth=1)
        for i, x, y in zip(members, xs, ys):
            ax.annotate(rep_ids[i], (x, y), fontsize=6, alpha=0.8)
    ax.set_xlabel("MDS dim 1")
    ax.set_ylabel("MDS dim 2")
    ax.axhline(0, color="gray", linewidth=0.5, alpha=0.5)
    ax.axvline(0, color="gray", linewidth=0.5, alpha=0.5)
    ax.legend(fontsize=7)
    ax.set_title("Representation map")
    fig.tight_layout()
    _save_fig(fig, path)


def _bars(path, labels, values, title, ylabel, rotate=0):
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(range(len(values)), values)
    ax.set_xticks(range(len(labels)), labels, rotation=rotate, fontsize=7)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.tight_layout()
    _save_fig(fig, path)


def emit(paths: "pipeline.RunPaths", dataset, has_responses: bool) -> list[str]:
    """Write the report plots (SVG) and copy the underlying tables."""
    missing = [name for name in (["embed", "mds", "scree"]
                                 + (["discriminate"] if has_responses else []))
               if not os.path.exists(os.path.join(paths.out_dir, _STAGE_PROBE[name]))]
    if missing:
        raise pipeline.StageError(f"report is missing stage outputs: {', '.join(missing)}")

    outputs = []

    def copy_table(src_rel, dst_name):
        dst_rel = os.path.join("report", dst_name)
        dst = paths.sub(dst_rel)
        shutil.copyfile(os.path.join(paths.out_dir, src_rel), dst + ".tmp")
        os.replace(dst + ".tmp", dst)
        outputs.append(dst_rel)

    emb = pipeline.tournament.load_embedding(
        os.path.join(paths.out_dir, "embed", "embedding.fbn"))
    rel = os.path.join("report", "embedding_heatmap.svg")
    _heatmap(paths.sub(rel), emb.matrix, emb.rep_ids,
             "Embedding matrix (rows: decoded target, cols: source)")
    outputs.append(rel)
    copy_table(os.path.join("embed", "embedding.tsv"), "embedding.tsv")

    coords = pipeline.load_coords(paths)
    groups = {b.spec.id: b.spec.model_group for b in dataset.bundles}
    rel = os.path.join("report", "mds_scatter.svg")
    _mds_scatter(paths.sub(rel), coords.coords, coords.rep_ids, groups)
    outputs.append(rel)
    copy_table(os.path.join("mds", "coords.tsv"), "coords.tsv")

    header, rows = read_table(os.path.join(paths.out_dir, "scree", "scree.tsv"))
    fractions = [float(r[1]) for r in rows]
    rel = os.path.join("report", "scree_bars.svg")
    _bars(paths.sub(rel), [r[0] for r in rows], fractions,
          "Variance explained by factor", "fraction")
    outputs.append(rel)
    copy_table(os.path.join("scree", "scree.tsv"), "scree.tsv")

    if has_responses:
        header, rows = read_table(
            os.path.join(paths.out_dir, "discriminate", "m_mean.tsv"))
        ids = header[1:]
        m_mean = np.array([[float(v) for v in row[1:]] for row in rows])
        rel = os.path.join("report", "discriminability_heatmap.svg")
        _heatmap(paths.sub(rel), m_mean, ids,
                 "Discriminability (mean across subjects)", symmetric=True)
        outputs.append(rel)
        copy_table(os.path.join("discriminate", "m_mean.tsv"), "m_mean.tsv")

        header, rows = read_table(
            os.path.join(paths.out_dir, "discriminate", "majority.tsv"))
        rel = os.path.join("report", "majority_bars.svg")
        _bars(paths.sub(rel), [r[0] for r in rows], [float(r[1]) for r in rows],
              "Majority-subject match rate", "% of partners matched", rotate=90)
        outputs.append(rel)
        copy_table(os.path.join("discriminate", "majority.tsv"), "majority.tsv")

        header, rows = read_table(
            os.path.join(paths.out_dir, "discriminate", "similarity_mean.tsv"))
        sim = np.array([[float(v) for v in row[1:]] for row in rows])
        rel = os.path.join("report", "similarity_heatmap.svg")
        _heatmap(paths.sub(rel), sim, header[1:],
                 "Performance-vector similarity", symmetric=True)
        outputs.append(rel)
        copy_table(os.path.join("discriminate", "similarity_mean.tsv"),
                   "similarity_mean.tsv")
    return outputs


_STAGE_PROBE = {
    "embed": os.path.join("embed", "embedding.fbn"),
    "mds": os.path.join("mds", "coords.fbn"),
    "scree": os.path.join("scree", "scree.tsv"),
    "discriminate": os.path.join("discriminate", "m_mean.tsv"),
}
