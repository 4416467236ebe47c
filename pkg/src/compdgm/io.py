"""On-disk formats: dataset directories, binary checkpoints, flat JSON configs, run manifests."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from . import nn
from .distributions import LikelihoodSpec
from .models import ComparativeVAE, build_model
from .numerics import Rng
from .simgen import SimDataset

FORMAT_VERSION = "1"


# ---------------------------------------------------------------- CSV


def _fmt(v: float, integer: bool) -> str:
    return str(int(v)) if integer else repr(float(v))


def write_matrix_csv(path: Path, x: np.ndarray, header: list[str]) -> None:
    """One row per sample; counts as integers, reals as shortest round-trip decimals."""
    x = np.asarray(x)
    integer = np.issubdtype(x.dtype, np.integer) or bool(np.all(np.mod(x, 1) == 0))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in x:
            w.writerow([_fmt(v, integer) for v in row])


def read_matrix_csv(path: Path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    for i, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise ValueError(f"{path}: ragged row at line {i} ({len(r)} fields, expected {len(header)})")
    x = np.array([[float(v) for v in r] for r in body], dtype=float).reshape(len(body), len(header))
    return header, x


# ---------------------------------------------------------------- checkpoints


def save_arrays(out_dir: Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """``manifest.json`` plus ``params.bin`` (little-endian f64, concatenated in manifest order)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries, offset, chunks = [], 0, []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    manifest = {"format_version": FORMAT_VERSION, "byte_order": "little-endian", "dtype": "f64",
                "entries": entries, "meta": meta or {}}
    (out_dir / "params.bin").write_bytes(b"".join(chunks))
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_arrays(in_dir: Path) -> tuple[dict[str, np.ndarray], dict]:
    in_dir = Path(in_dir)
    manifest = json.loads((in_dir / "manifest.json").read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format_version')!r}")
    blob = (in_dir / "params.bin").read_bytes()
    out = {}
    for e in manifest["entries"]:
        n = int(np.prod(e["shape"], dtype=int))
        out[e["name"]] = np.frombuffer(blob, dtype="<f8", count=n, offset=e["offset"]).reshape(e["shape"]).copy()
    return out, manifest["meta"]


def save_model(out_dir: Path, model: ComparativeVAE, extra_meta: dict | None = None) -> None:
    meta = {"kind": model.kind, "p_hat": model.p_hat, "q_hat": model.q_hat, "n_features": model.n_features,
            "likelihood": model.likelihood.kind, "sigma2": model.likelihood.sigma2, "log_input": model.log_input,
            "dropout": model.specs["decoder"].hidden[0].dropout}
    meta.update(extra_meta or {})
    save_arrays(out_dir, model.snapshot(), meta)


def load_model(in_dir: Path) -> ComparativeVAE:
    arrays, meta = load_arrays(in_dir)
    lik = LikelihoodSpec(meta["likelihood"], sigma2=meta["sigma2"])
    model = build_model(meta["kind"], meta["p_hat"], meta["q_hat"], meta["n_features"], lik,
                        Rng(0, "load"), meta["dropout"], meta["log_input"])
    model.restore(arrays)
    return model


def save_store(out_dir: Path, store: nn.ParamStore, spec: nn.MlpSpec) -> None:
    arrays = {k: t.data for k, t in store.params.items()}
    arrays.update({f"buffer:{k}": v for k, v in store.buffers.items()})
    save_arrays(out_dir, arrays, {"spec": spec_to_dict(spec)})


def load_store(in_dir: Path) -> tuple[nn.ParamStore, nn.MlpSpec]:
    arrays, meta = load_arrays(in_dir)
    store = nn.ParamStore()
    for k, v in arrays.items():
        if k.startswith("buffer:"):
            store.buffers[k[len("buffer:"):]] = v
        else:
            store.params[k] = ad.Tensor(v, name=k)
    return store, spec_from_dict(meta["spec"])


def spec_to_dict(spec: nn.MlpSpec) -> dict:
    return asdict(spec)


def spec_from_dict(d: dict) -> nn.MlpSpec:
    d = dict(d)
    d["hidden"] = tuple(nn.Layer(**layer) for layer in d["hidden"])
    d["heads"] = tuple(tuple(h) for h in d["heads"])
    return nn.MlpSpec(**d)


# ---------------------------------------------------------------- datasets


@dataclass
class LoadedDataset:
    x_background: np.ndarray
    x_target: np.ndarray
    z_true: np.ndarray | None
    s_true: np.ndarray | None
    labels: np.ndarray | None
    meta: dict

    @property
    def n_features(self) -> int:
        return self.x_target.shape[1]


def _feature_header(g: int) -> list[str]:
    return [f"f{i}" for i in range(g)]


def write_dataset(out_dir: Path, ds: SimDataset, seed: int | None = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    g = ds.n_features
    write_matrix_csv(out_dir / "X_background.csv", ds.x_background, _feature_header(g))
    write_matrix_csv(out_dir / "X_target.csv", ds.x_target, _feature_header(g))
    if ds.has_latents:
        # background rows carry s = 0, exactly as they were generated
        n_b = ds.x_background.shape[0]
        s_all = np.vstack([np.zeros((n_b, ds.s_true.shape[1])), ds.s_true])
        lat = np.hstack([ds.z_true, s_all])
        header = [f"z{i}" for i in range(ds.z_true.shape[1])] + [f"s{i}" for i in range(ds.s_true.shape[1])]
        write_matrix_csv(out_dir / "latents.csv", lat.astype(float), header)
    meta = {
        "format_version": FORMAT_VERSION,
        "config": ds.config,
        "seed": ds.config.get("seed", seed),
        "noise": ds.noise,
        "n_background": int(ds.x_background.shape[0]),
        "n_target": int(ds.x_target.shape[0]),
        "n_features": g,
        "has_latents": ds.has_latents,
        "theta_true": None if ds.theta_true is None else [float(t) for t in ds.theta_true],
        "labels": None if ds.labels is None else [int(v) for v in ds.labels],
    }
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2))
    if ds.mixing is not None:
        save_store(out_dir / "mixing", ds.mixing, ds.mixing_spec)
    return out_dir


def read_dataset(in_dir: Path) -> LoadedDataset:
    in_dir = Path(in_dir)
    meta = json.loads((in_dir / "meta.json").read_text())
    if meta.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format {meta.get('format_version')!r}")
    _, xb = read_matrix_csv(in_dir / "X_background.csv")
    _, xt = read_matrix_csv(in_dir / "X_target.csv")
    if xb.shape[1] != xt.shape[1]:
        raise ValueError("background and target matrices have different feature counts")
    z = s = None
    if meta.get("has_latents"):
        header, lat = read_matrix_csv(in_dir / "latents.csv")
        zc = [i for i, h in enumerate(header) if h.startswith("z")]
        sc = [i for i, h in enumerate(header) if h.startswith("s")]
        z, s = lat[:, zc], lat[xb.shape[0]:, sc]
    labels = None if meta.get("labels") is None else np.asarray(meta["labels"], dtype=int)
    return LoadedDataset(xb, xt, z, s, labels, meta)


def ingest_external(background_csv: Path, target_csv: Path, out_dir: Path, labels_csv: Path | None = None,
                    count_data: bool = True) -> Path:
    """Copy two external matrices (and optional target labels) into the dataset layout, without latents."""
    hb, xb = read_matrix_csv(Path(background_csv))
    ht, xt = read_matrix_csv(Path(target_csv))
    if xb.shape[1] != xt.shape[1]:
        raise ValueError(f"column count mismatch: {xb.shape[1]} vs {xt.shape[1]}")
    if count_data:
        for name, x in (("background", xb), ("target", xt)):
            if np.any(x < 0):
                raise ValueError(f"negative counts in {name} matrix")
            if np.any(np.mod(x, 1) != 0):
                raise ValueError(f"non-integer counts in {name} matrix")
    labels = None
    if labels_csv is not None:
        _, lab = read_matrix_csv(Path(labels_csv))
        labels = lab[:, 0].astype(int)
        if labels.size != xt.shape[0]:
            raise ValueError("labels must have one entry per target row")
    ds = SimDataset(xb, xt, None, None, "external", labels=labels,
                    config={"source": "external", "background": str(background_csv), "target": str(target_csv)})
    return write_dataset(out_dir, ds)


# ---------------------------------------------------------------- configs and manifests


def load_json_config(path: Path) -> dict:
    d = json.loads(Path(path).read_text())
    if not isinstance(d, dict):
        raise ValueError("config file must hold a flat JSON object")
    for k, v in d.items():
        if isinstance(v, dict):
            raise ValueError(f"config must be flat; key {k!r} holds an object")
    return d


@dataclass
class RunManifest:
    config: dict
    seeds: list[int]
    artifacts: dict[str, str]
    version: str = __version__
    wall_clock_s: dict[str, float] = field(default_factory=dict)
    created: str = field(default_factory=lambda: time.strftime("%Y-%m-%dT%H:%M:%S"))

    def write(self, path: Path) -> None:
        missing = [p for p in self.artifacts.values() if not Path(p).exists()]
        if missing:
            raise FileNotFoundError(f"manifest references missing artifacts: {missing}")
        Path(path).write_text(json.dumps(asdict(self), indent=2))
