"""Stage orchestration: config, manifest, checkpointed stage runs.

Every stage is idempotent: its record in the run manifest stores a hash of
its inputs (stage-relevant config plus upstream output hashes) and of its
output files; re-running a completed stage with unchanged inputs verifies
the outputs and does nothing. All outputs are written atomically, and the
decoder grid persists each job separately so an interrupted run resumes
with only the missing jobs and reaches a byte-identical final state.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import os
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import __version__, brainmap, encoding, geometry, synthgen, tournament, transfer
from . import feature_store as fs
from .container import read_container, write_container
from .seeding import derive_seed
from .tables import matrix_table, write_table

logger = logging.getLogger(__name__)


class StageError(RuntimeError):
    pass


class DependencyError(StageError):
    def __init__(self, stage, missing):
        super().__init__(f"stage {stage!r} requires {missing!r} to run first")
        self.missing = missing


class ConfigMismatch(StageError):
    def __init__(self):
        super().__init__(
            "config changed since this run directory was created; "
            "pass --force to proceed with the new config"
        )


class StageIncomplete(StageError):
    def __init__(self, stage, remaining):
        super().__init__(f"stage {stage!r} stopped with {remaining} jobs remaining")
        self.remaining = remaining


DEFAULT_CONFIG = {
    "out_dir": "run",
    "seed": 0,
    "workers": 1,
    "retries": 2,
    "corpus": None,
    "bundles": [],
    "universal_id": None,
    "responses": [],
    "synth": None,
    "train": {
        "latent_dim": 20,
        "batch_size": 1024,
        "lr_encoder": 1e-4,
        "lr_decoder": 2e-5,
        "max_batches": 1000,
        "patience": 1,
        "validation_fraction": 0.1,
    },
    "tournament": {"diag_value": 0.1, "renormalize_off_target": False},
    "geometry": {"k": 2, "k_max": None, "anchor": None, "anchor_sign": "negative"},
    "encoding": {
        "alphas": [float(a) for a in encoding.DEFAULT_ALPHAS],
        "folds": 50,
        "holdout": 0.2,
        "delays": [1, 2, 3, 4],
        "tr_seconds": 2.0,
        "words_per_tr": 4.0,
        "channel_mask": None,  # optional channel index list applied on load
    },
    "discriminate": {"majority_threshold": None},
}

# config keys that identify results; runtime knobs are excluded
_HASH_EXCLUDE = ("out_dir", "workers", "retries")


def load_config(path: str | os.PathLike) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        user = json.load(fh)
    return merge_config(user)


def merge_config(user: dict) -> dict:
    config = copy.deepcopy(DEFAULT_CONFIG)
    for key, value in user.items():
        if isinstance(value, dict) and isinstance(config.get(key), dict):
            config[key].update(value)
        else:
            config[key] = value
    if os.environ.get("REPSPACE_OUT_DIR"):
        config["out_dir"] = os.environ["REPSPACE_OUT_DIR"]
    if os.environ.get("REPSPACE_WORKERS"):
        config["workers"] = int(os.environ["REPSPACE_WORKERS"])
    return config


def config_hash(config: dict) -> str:
    relevant = {k: v for k, v in config.items() if k not in _HASH_EXCLUDE}
    blob = json.dumps(relevant, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def train_config(config: dict) -> transfer.TrainConfig:
    t = config["train"]
    return transfer.TrainConfig(
        latent_dim=t["latent_dim"],
        batch_size=t["batch_size"],
        lr_encoder=t["lr_encoder"],
        lr_decoder=t["lr_decoder"],
        max_batches=t["max_batches"],
        patience=t["patience"],
        seed=config["seed"],
        validation_fraction=t["validation_fraction"],
    )


# -- run directory ------------------------------------------------------------

@dataclass
class RunPaths:
    out_dir: str

    def sub(self, *parts) -> str:
        path = os.path.join(self.out_dir, *parts)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        return path

    @property
    def manifest(self) -> str:
        return os.path.join(self.out_dir, "manifest.json")

    @property
    def dataset(self) -> str:
        return os.path.join(self.out_dir, "dataset.json")


def _file_hash(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        while chunk := fh.read(1 << 20):
            digest.update(chunk)
    return digest.hexdigest()


def _outputs_hash(out_dir: str, relpaths: list[str]) -> str:
    digest = hashlib.sha256()
    for rel in sorted(relpaths):
        digest.update(rel.encode("utf-8"))
        digest.update(b":")
        digest.update(_file_hash(os.path.join(out_dir, rel)).encode("utf-8"))
        digest.update(b"\n")
    return digest.hexdigest()


def load_manifest(paths: RunPaths) -> dict:
    if os.path.exists(paths.manifest):
        with open(paths.manifest, "r", encoding="utf-8") as fh:
            return json.load(fh)
    return {"toolkit_version": __version__, "config_hash": None, "stages": {}}


def save_manifest(paths: RunPaths, manifest: dict) -> None:
    tmp = paths.manifest + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, paths.manifest)


def _safe_name(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "-", name)


# -- dataset plumbing ----------------------------------------------------------

def source_stage(config: dict) -> str:
    return "synth" if config.get("synth") else "ingest"


def _write_dataset_doc(paths, corpus_rel, bundle_paths, universal_id, response_paths):
    doc = {
        "corpus": corpus_rel,
        "bundles": bundle_paths,
        "universal_id": universal_id,
        "responses": response_paths,
    }
    tmp = paths.dataset + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, paths.dataset)


def load_dataset(paths: RunPaths) -> tuple[fs.AlignedDataset, dict]:
    with open(paths.dataset, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    corpus, _, _ = fs.load_corpus_manifest(os.path.join(paths.out_dir, doc["corpus"]))
    bundles = [fs.read_bundle(os.path.join(paths.out_dir, p)) for p in doc["bundles"]]
    dataset = fs.align(corpus, bundles, doc["universal_id"])
    return dataset, doc


def save_responses(path, response: encoding.ResponseDataset, name: str,
                   story_ids: tuple[str, ...]) -> None:
    fields = {
        "kind": "responses",
        "name": name,
        "channels": str(response.n_channels),
        "trs": str(response.n_trs),
        "tr_seconds": repr(response.tr_seconds),
        "story_ids": ",".join(story_ids),
        "story_tr_counts": ",".join(str(c) for c in response.story_tr_counts),
        "dtype": "f32le",
        "layout": "time-major",
    }
    write_container(path, fields, response.responses)


def load_responses(path, corpus: fs.TokenCorpus) -> tuple[str, encoding.ResponseDataset]:
    fields, flat = read_container(path)
    trs, channels = int(fields["trs"]), int(fields["channels"])
    counts = tuple(int(c) for c in fields["story_tr_counts"].split(","))
    story_ids = tuple(fields["story_ids"].split(","))
    if story_ids != tuple(s.id for s in corpus.stories):
        raise StageError(f"{path}: response stories do not match the corpus")
    responses = flat.reshape(trs, channels)
    role_rows = {"train": [], "test": []}
    start = 0
    for story, count in zip(corpus.stories, counts):
        role_rows[story.role].append(np.arange(start, start + count))
        start += count
    dataset = encoding.ResponseDataset(
        responses=responses,
        tr_seconds=float(fields["tr_seconds"]),
        train_trs=np.concatenate(role_rows["train"]) if role_rows["train"] else np.empty(0, np.intp),
        test_trs=np.concatenate(role_rows["test"]) if role_rows["test"] else np.empty(0, np.intp),
        story_tr_counts=counts,
    )
    return fields["name"], dataset


# -- stage bodies ---------------------------------------------------------------

def _stage_synth(config, paths, ctx):
    synth = config["synth"]
    fam = synth["family"]
    stories = [fs.story_from_dict(e) for e in synth["stories"]]
    corpus = fs.TokenCorpus(stories)
    spec = synthgen.NestedFamilySpec(
        seed=fam["seed"],
        total_latents=fam["total_latents"],
        token_count=corpus.total_tokens,
        reps=tuple(
            synthgen.RepGenSpec(r["id"], r["visible_latents"], r["output_dim"],
                                r.get("noise_sd", 0.0))
            for r in fam["reps"]
        ),
    )
    bundles = synthgen.gen_nested_reps(spec)
    rep_docs = {r["id"]: r for r in fam["reps"]}
    outputs = []
    bundle_rels = []
    for i, bundle in enumerate(bundles):
        doc = rep_docs[bundle.spec.id]
        if "mds_weight" in doc or "model_group" in doc:
            bundle = fs.FeatureBundle(
                spec=dataclasses.replace(
                    bundle.spec,
                    mds_weight=doc.get("mds_weight", bundle.spec.mds_weight),
                    model_group=doc.get("model_group", bundle.spec.model_group),
                ),
                values=bundle.values,
            )
        rel = os.path.join("bundles", f"{i:03d}_{_safe_name(bundle.spec.id)}.fbn")
        fs.write_bundle(bundle, paths.sub(rel))
        outputs.append(rel)
        bundle_rels.append(rel)
    corpus_rel = "corpus.json"
    fs.save_corpus_manifest(paths.sub(corpus_rel), corpus, bundle_rels,
                            synth["universal_id"])
    outputs.append(corpus_rel)

    response_rels = []
    by_id = {b.spec.id: b for b in bundles}
    for rspec_doc in synth.get("responses", []):
        rspec = synthgen.SyntheticResponseSpec(
            seed=rspec_doc["seed"],
            source_rep=rspec_doc["source_rep"],
            channels=rspec_doc["channels"],
            tr_seconds=rspec_doc.get("tr_seconds", config["encoding"]["tr_seconds"]),
            delays=tuple(rspec_doc.get("delays", config["encoding"]["delays"])),
            words_per_tr=rspec_doc.get("words_per_tr", config["encoding"]["words_per_tr"]),
            noise_sd=rspec_doc.get("noise_sd"),
            noise_snr=rspec_doc.get("noise_snr"),
        )
        result = synthgen.gen_synthetic_responses(rspec, by_id[rspec.source_rep], corpus)
        name = rspec_doc["name"]
        rel = os.path.join("responses", f"{_safe_name(name)}.fbn")
        save_responses(paths.sub(rel), result.response, name,
                       tuple(s.id for s in corpus.stories))
        truth_rel = os.path.join("responses", f"{_safe_name(name)}.truth.fbn")
        write_container(paths.sub(truth_rel), {
            "kind": "true-weights", "name": name,
            "rows": str(result.true_weights.shape[0]),
            "cols": str(result.true_weights.shape[1]),
            "dtype": "f64le", "layout": "row-major",
        }, result.true_weights)
        outputs.extend([rel, truth_rel])
        response_rels.append(rel)
    _write_dataset_doc(paths, corpus_rel, bundle_rels, synth["universal_id"], response_rels)
    outputs.append("dataset.json")
    return outputs


def _stage_ingest(config, paths, ctx):
    if not config.get("corpus"):
        raise StageError("ingest needs a corpus manifest path in the config")
    corpus, manifest_bundles, manifest_universal = fs.load_corpus_manifest(config["corpus"])
    bundle_paths = [os.path.abspath(p) for p in (config["bundles"] or manifest_bundles)]
    universal_id = config["universal_id"] or manifest_universal
    bundles = [fs.read_bundle(p) for p in bundle_paths]
    fs.align(corpus, bundles, universal_id)  # validation
    corpus_rel = "corpus.json"
    fs.save_corpus_manifest(paths.sub(corpus_rel), corpus, bundle_paths, universal_id,
                            inline_tokens=True)
    response_paths = [os.path.abspath(p) for p in config.get("responses", [])]
    _write_dataset_doc(paths, corpus_rel, bundle_paths, universal_id, response_paths)
    return [corpus_rel, "dataset.json"]


def _stage_train_encoders(config, paths, ctx):
    dataset, _ = load_dataset(paths)
    cfg = train_config(config)
    provenance = {"config_hash": config_hash(config)}
    outputs = []
    for i, rep_id in enumerate(dataset.rep_ids):
        encoder, readout = transfer.train_encoder(dataset, rep_id, cfg)
        enc_rel = os.path.join("encoders", f"enc_{i:03d}.fbn")
        transfer.save_map(paths.sub(enc_rel), encoder, extra=provenance)
        readout_rel = os.path.join("encoders", f"readout_{i:03d}.fbn")
        transfer.save_map(paths.sub(readout_rel), readout, extra=provenance)
        latent = transfer.encode(encoder, dataset)
        lat_rel = os.path.join("latents", f"lat_{i:03d}.fbn")
        transfer.save_latents(paths.sub(lat_rel), latent)
        outputs.extend([enc_rel, readout_rel, lat_rel])
    return outputs


def _decoder_rel(i: int, j: int) -> str:
    return os.path.join("decoders", f"dec_{i:03d}_{j:03d}.fbn")


def _decoder_job(out_dir: str, i: int, j: int, config: dict) -> str:
    """One grid job: train decoder latents[i] -> bundle[j] and persist it."""
    paths = RunPaths(out_dir)
    dataset, _ = load_dataset(paths)
    latent = transfer.load_latents(os.path.join(out_dir, "latents", f"lat_{i:03d}.fbn"))
    target = dataset.bundles[j]
    cfg = train_config(config)
    rel = _decoder_rel(i, j)
    retries = config.get("retries", 2)
    for attempt in range(retries + 1):
        try:
            decoder = transfer.train_decoder(latent, target, dataset.corpus, cfg)
            transfer.save_map(paths.sub(rel), decoder,
                              extra={"config_hash": config_hash(config)})
            return rel
        except Exception:
            if attempt == retries:
                raise
            logger.exception("decoder job (%d, %d) failed; retry %d", i, j, attempt + 1)
    raise AssertionError("unreachable")


def _decoder_job_star(args):
    return _decoder_job(*args)


def schedule_decoder_grid(config: dict, paths: RunPaths, workers: int = 1,
                          max_jobs: int | None = None) -> list[str]:
    """Run the n^2 decoder grid over a bounded worker pool.

    Each job's output is persisted atomically under a name derived from the
    (source, target) pair, and jobs whose output already loads cleanly are
    skipped, so a crashed run resumes with only the missing jobs. Seeds
    derive from job identity, making the final file set independent of
    worker count and completion order. ``max_jobs`` bounds how many pending
    jobs this invocation runs (useful on preemptible machines); if jobs
    remain, the stage reports itself incomplete.
    """
    dataset, _ = load_dataset(paths)
    n = dataset.n
    all_rels = [_decoder_rel(i, j) for i in range(n) for j in range(n)]
    pending = []
    for i in range(n):
        for j in range(n):
            rel = _decoder_rel(i, j)
            full = os.path.join(paths.out_dir, rel)
            if os.path.exists(full):
                try:
                    transfer.load_map(full)
                    continue
                except Exception:
                    logger.warning("re-running decoder job with unreadable output: %s", rel)
            pending.append((i, j))
    if max_jobs is not None:
        run_now, deferred = pending[:max_jobs], pending[max_jobs:]
    else:
        run_now, deferred = pending, []
    args = [(paths.out_dir, i, j, config) for i, j in run_now]
    if workers > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            list(pool.map(_decoder_job_star, args))
    else:
        for a in args:
            _decoder_job_star(a)
    if deferred:
        raise StageIncomplete("train-decoders", len(deferred))
    return all_rels


def _stage_train_decoders(config, paths, ctx):
    return schedule_decoder_grid(config, paths, workers=ctx["workers"],
                                 max_jobs=ctx["max_jobs"])


def _load_latents_all(paths, n):
    return [transfer.load_latents(os.path.join(paths.out_dir, "latents", f"lat_{i:03d}.fbn"))
            for i in range(n)]


def _stage_tournament(config, paths, ctx):
    dataset, _ = load_dataset(paths)
    n = dataset.n
    latents = _load_latents_all(paths, n)
    _, test_rows = fs.split(dataset)
    outputs = []
    for j, target_id in enumerate(dataset.rep_ids):
        target_rows = dataset.bundles[j].values[test_rows]
        mse_vectors = []
        for i in range(n):
            decoder = transfer.load_map(os.path.join(paths.out_dir, _decoder_rel(i, j)))
            mse_vectors.append(transfer.decoder_sample_mse(
                decoder, latents[i].values[test_rows], target_rows))
        t = tournament.build_tournament(target_id, mse_vectors)
        rel = os.path.join("tournament", f"w_{j:03d}.fbn")
        tournament.save_tournament(paths.sub(rel), t)
        outputs.append(rel)
    return outputs


def _stage_embed(config, paths, ctx):
    dataset, _ = load_dataset(paths)
    weight_vectors = []
    for j in range(dataset.n):
        t = tournament.load_tournament(
            os.path.join(paths.out_dir, "tournament", f"w_{j:03d}.fbn"))
        weight_vectors.append(tournament.ahp_weights(t))
    emb = tournament.assemble_embedding(
        weight_vectors, dataset.rep_ids,
        diag_value=config["tournament"]["diag_value"],
        renormalize_off_target=config["tournament"]["renormalize_off_target"],
    )
    tournament.save_embedding(paths.sub(os.path.join("embed", "embedding.fbn")), emb)
    matrix_table(paths.sub(os.path.join("embed", "embedding.tsv")), emb.matrix,
                 emb.rep_ids, emb.rep_ids)
    return [os.path.join("embed", "embedding.fbn"), os.path.join("embed", "embedding.tsv")]


def _load_embedding(paths):
    return tournament.load_embedding(os.path.join(paths.out_dir, "embed", "embedding.fbn"))


def _stage_mds(config, paths, ctx):
    dataset, _ = load_dataset(paths)
    emb = _load_embedding(paths)
    weights = fs.resolved_mds_weights(dataset)
    coords = geometry.weighted_mds(
        geometry.row_distances(emb), weights, k=config["geometry"]["k"],
        rep_ids=emb.rep_ids,
    )
    anchor = config["geometry"]["anchor"] or dataset.universal_id
    coords = geometry.orient(coords, anchor, config["geometry"]["anchor_sign"])
    rel_fbn = os.path.join("mds", "coords.fbn")
    write_container(paths.sub(rel_fbn), {
        "kind": "mds-coords",
        "n": str(coords.coords.shape[0]),
        "k": str(coords.k),
        "rep_ids": ",".join(coords.rep_ids),
        "stress": repr(coords.stress),
        "dim_variances": ",".join(repr(float(v)) for v in coords.dim_variances),
        "dtype": "f64le", "layout": "row-major",
    }, coords.coords)
    rel_tsv = os.path.join("mds", "coords.tsv")
    groups = {b.spec.id: b.spec.model_group for b in dataset.bundles}
    write_table(paths.sub(rel_tsv),
                ["id"] + [f"dim{d + 1}" for d in range(coords.k)] + ["model_group"],
                [[rid] + list(coords.coords[i]) + [groups[rid]]
                 for i, rid in enumerate(coords.rep_ids)])
    return [rel_fbn, rel_tsv]


def load_coords(paths: RunPaths) -> geometry.EmbeddingCoords:
    fields, flat = read_container(os.path.join(paths.out_dir, "mds", "coords.fbn"))
    n, k = int(fields["n"]), int(fields["k"])
    return geometry.EmbeddingCoords(
        coords=flat.reshape(n, k),
        stress=float(fields["stress"]),
        dim_variances=np.array([float(v) for v in fields["dim_variances"].split(",")]),
        rep_ids=fields["rep_ids"].split(","),
    )


def _stage_scree(config, paths, ctx):
    emb = _load_embedding(paths)
    k_max = config["geometry"]["k_max"] or min(emb.n, 10)
    fractions = geometry.scree(emb, k_max)
    rel = os.path.join("scree", "scree.tsv")
    write_table(paths.sub(rel), ["dim", "variance_fraction"],
                [[d + 1, f] for d, f in enumerate(fractions)])
    return [rel]


def _iter_responses(paths, doc, corpus):
    for rel in doc.get("responses", []):
        full = rel if os.path.isabs(rel) else os.path.join(paths.out_dir, rel)
        yield load_responses(full, corpus)


def _stage_encode(config, paths, ctx):
    dataset, doc = load_dataset(paths)
    if not doc.get("responses"):
        raise StageError("encode needs response datasets (synth responses or response files)")
    enc_cfg = config["encoding"]
    outputs = []
    for name, response in _iter_responses(paths, doc, dataset.corpus):
        if enc_cfg.get("channel_mask") is not None:
            response = encoding.select_channels(response, enc_cfg["channel_mask"])
        rho_rows = []
        for rep_id in dataset.rep_ids:
            design = encoding.build_design(
                dataset.bundle(rep_id), dataset.corpus,
                tr_seconds=response.tr_seconds,
                delays=tuple(enc_cfg["delays"]),
                words_per_tr=enc_cfg["words_per_tr"],
                story_tr_counts=response.story_tr_counts,
            )
            result = encoding.fit_encoding_model(
                rep_id, design.matrix, response,
                alphas=enc_cfg["alphas"], folds=enc_cfg["folds"],
                holdout=enc_cfg["holdout"],
                seed=derive_seed(config["seed"], "encode", name, rep_id),
            )
            rep_idx = dataset.index_of(rep_id)
            rel = os.path.join("encode", f"result_{_safe_name(name)}_{rep_idx:03d}.fbn")
            width, channels = result.weights.shape
            payload = np.concatenate([
                result.alpha, result.rho, result.undefined.astype(np.float64),
                result.weights.ravel(),
            ])
            write_container(paths.sub(rel), {
                "kind": "encoding-result", "name": name, "rep_id": rep_id,
                "width": str(width), "channels": str(channels),
                "dtype": "f64le", "layout": "alpha,rho,undefined,weights",
            }, payload)
            outputs.append(rel)
            rho_rows.append(result.rho)
        rho = np.vstack(rho_rows)
        rel_fbn = os.path.join("encode", f"rho_{_safe_name(name)}.fbn")
        write_container(paths.sub(rel_fbn), {
            "kind": "rho", "name": name, "n": str(dataset.n),
            "channels": str(rho.shape[1]),
            "rep_ids": ",".join(dataset.rep_ids),
            "dtype": "f64le", "layout": "row-major",
        }, rho)
        rel_tsv = os.path.join("encode", f"rho_{_safe_name(name)}.tsv")
        channel_ids = [f"c{c:05d}" for c in range(rho.shape[1])]
        matrix_table(paths.sub(rel_tsv), rho.T, channel_ids, dataset.rep_ids,
                     corner="channel")
        outputs.extend([rel_fbn, rel_tsv])
    return outputs


def load_rho(paths: RunPaths, name: str) -> tuple[list[str], np.ndarray]:
    fields, flat = read_container(
        os.path.join(paths.out_dir, "encode", f"rho_{_safe_name(name)}.fbn"))
    n, channels = int(fields["n"]), int(fields["channels"])
    return fields["rep_ids"].split(","), flat.reshape(n, channels)


def _response_names(paths, doc, corpus):
    return [name for name, _ in _iter_responses(paths, doc, corpus)]


def _stage_project(config, paths, ctx):
    dataset, doc = load_dataset(paths)
    coords = load_coords(paths)
    outputs = []
    for name in _response_names(paths, doc, dataset.corpus):
        rep_ids, rho = load_rho(paths, name)
        profile = brainmap.perf_profile(rho, rep_ids, subject_id=name)
        projection = brainmap.project_dim1(profile, coords)
        rel = os.path.join("project", f"projection_{_safe_name(name)}.tsv")
        write_table(paths.sub(rel), ["channel", "dim1_projection"],
                    [[f"c{c:05d}", v] for c, v in enumerate(projection)])
        outputs.append(rel)
    return outputs


def _stage_discriminate(config, paths, ctx):
    dataset, doc = load_dataset(paths)
    emb = _load_embedding(paths)
    names = _response_names(paths, doc, dataset.corpus)
    matrices = []
    outputs = []
    similarity_sum = None
    for name in names:
        rep_ids, rho = load_rho(paths, name)
        profile = brainmap.perf_profile(rho, rep_ids, subject_id=name)
        m = brainmap.discriminability_matrix(emb, profile)
        matrices.append(m)
        rel_fbn = os.path.join("discriminate", f"m_{_safe_name(name)}.fbn")
        write_container(paths.sub(rel_fbn), {
            "kind": "discriminability", "name": name, "n": str(emb.n),
            "rep_ids": ",".join(rep_ids), "dtype": "f64le", "layout": "row-major",
        }, m)
        rel_tsv = os.path.join("discriminate", f"m_{_safe_name(name)}.tsv")
        matrix_table(paths.sub(rel_tsv), m, rep_ids, rep_ids)
        sim = brainmap.perf_similarity(profile)
        rel_sim = os.path.join("discriminate", f"similarity_{_safe_name(name)}.tsv")
        matrix_table(paths.sub(rel_sim), sim, rep_ids, rep_ids)
        similarity_sum = sim if similarity_sum is None else similarity_sum + sim
        outputs.extend([rel_fbn, rel_tsv, rel_sim])
    threshold = config["discriminate"]["majority_threshold"]
    if threshold is None:
        threshold = len(names) // 2 + 1
    majority = brainmap.majority_match(matrices, threshold)
    rel = os.path.join("discriminate", "majority.tsv")
    write_table(paths.sub(rel), ["id", "match_percent"],
                [[rid, v] for rid, v in zip(dataset.rep_ids, majority)])
    outputs.append(rel)
    mean_rel = os.path.join("discriminate", "m_mean.tsv")
    matrix_table(paths.sub(mean_rel), np.mean(matrices, axis=0),
                 dataset.rep_ids, dataset.rep_ids)
    sim_rel = os.path.join("discriminate", "similarity_mean.tsv")
    matrix_table(paths.sub(sim_rel), similarity_sum / len(names),
                 dataset.rep_ids, dataset.rep_ids)
    outputs.extend([mean_rel, sim_rel])
    return outputs


def _stage_report(config, paths, ctx):
    from . import report
    dataset, doc = load_dataset(paths)
    has_responses = bool(doc.get("responses"))
    return report.emit(paths, dataset, has_responses)


STAGES = {
    "ingest": _stage_ingest,
    "synth": _stage_synth,
    "train-encoders": _stage_train_encoders,
    "train-decoders": _stage_train_decoders,
    "tournament": _stage_tournament,
    "embed": _stage_embed,
    "mds": _stage_mds,
    "scree": _stage_scree,
    "encode": _stage_encode,
    "project": _stage_project,
    "discriminate": _stage_discriminate,
    "report": _stage_report,
}

# config sections whose change invalidates a stage
_STAGE_CONFIG_KEYS = {
    "ingest": ("corpus", "bundles", "universal_id", "responses"),
    "synth": ("synth",),
    "train-encoders": ("train", "seed"),
    "train-decoders": ("train", "seed"),
    "tournament": (),
    "embed": ("tournament",),
    "mds": ("geometry",),
    "scree": ("geometry",),
    "encode": ("encoding", "seed"),
    "project": (),
    "discriminate": ("discriminate",),
    "report": (),
}


def stage_deps(name: str, config: dict) -> list[str]:
    src = source_stage(config)
    wants_responses = bool(
        (config.get("synth") or {}).get("responses") or config.get("responses"))
    deps = {
        "ingest": [],
        "synth": [],
        "train-encoders": [src],
        "train-decoders": ["train-encoders"],
        "tournament": ["train-decoders"],
        "embed": ["tournament"],
        "mds": ["embed"],
        "scree": ["embed"],
        "encode": [src],
        "project": ["mds", "encode"],
        "discriminate": ["embed", "encode"],
        "report": ["embed", "mds", "scree"] + (
            ["encode", "project", "discriminate"] if wants_responses else []),
    }
    return deps[name]


def stage_order(config: dict) -> list[str]:
    wants_responses = bool(
        (config.get("synth") or {}).get("responses") or config.get("responses"))
    order = [source_stage(config), "train-encoders", "train-decoders", "tournament",
             "embed", "mds", "scree"]
    if wants_responses:
        order += ["encode", "project", "discriminate"]
    return order + ["report"]


def _inputs_hash(name, config, manifest):
    slice_doc = {key: config.get(key) for key in _STAGE_CONFIG_KEYS[name]}
    upstream = {dep: manifest["stages"][dep]["outputs_hash"]
                for dep in stage_deps(name, config)}
    blob = json.dumps({"config": slice_doc, "upstream": upstream},
                      sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _outputs_verify(paths, record) -> bool:
    try:
        return _outputs_hash(paths.out_dir, record["outputs"]) == record["outputs_hash"]
    except FileNotFoundError:
        return False


def run_stage(name: str, config: dict, force: bool = False,
              workers: int | None = None, max_jobs: int | None = None) -> dict:
    """Run one stage idempotently; returns its manifest record."""
    if name not in STAGES:
        raise StageError(f"unknown stage {name!r}; stages: {', '.join(STAGES)}")
    paths = RunPaths(config["out_dir"])
    os.makedirs(paths.out_dir, exist_ok=True)
    manifest = load_manifest(paths)
    new_hash = config_hash(config)
    if manifest["stages"] and manifest["config_hash"] != new_hash:
        if not force:
            raise ConfigMismatch()
        manifest["config_hash"] = new_hash
    else:
        manifest["config_hash"] = new_hash
    for dep in stage_deps(name, config):
        if dep not in manifest["stages"]:
            raise DependencyError(name, dep)
    inputs_hash = _inputs_hash(name, config, manifest)
    record = manifest["stages"].get(name)
    if record and not force and record["inputs_hash"] == inputs_hash \
            and _outputs_verify(paths, record):
        logger.info("stage %s is up to date; skipping", name)
        return record
    started = time.monotonic()
    ctx = {"workers": workers if workers is not None else config.get("workers", 1),
           "max_jobs": max_jobs}
    outputs = STAGES[name](config, paths, ctx)
    record = {
        "inputs_hash": inputs_hash,
        "outputs": sorted(outputs),
        "outputs_hash": _outputs_hash(paths.out_dir, outputs),
        "wall_time_s": round(time.monotonic() - started, 3),
    }
    manifest["stages"][name] = record
    save_manifest(paths, manifest)
    logger.info("stage %s finished in %.1fs (%d outputs)",
                name, record["wall_time_s"], len(outputs))
    return record


def run_all(config: dict, force: bool = False, workers: int | None = None) -> None:
    for name in stage_order(config):
        run_stage(name, config, force=force, workers=workers)
