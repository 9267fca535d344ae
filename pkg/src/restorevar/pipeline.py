"""Stage orchestration: data, codec, transformer, refiner, decoder fine-tune,
restoration and evaluation.

Each training stage reads only frozen upstream checkpoints and verifies by
weight hash that they were not modified.
"""
from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import checkpoint as ckpt_io
from .autodiff.tensor import no_grad
from .codec import Codec, CodecConfig, train_codec
from .config import RunConfig
from .data import KINDS, load_split, make_pairs, read_manifest, write_dataset
from .finetune import LossWeights, finetune_decoder, format_log
from .metrics import evaluate, table_csv
from .refiner import LRT, LRTConfig, refine, train_lrt
from .transformer import ScaleAR, TransformerConfig, prepare_teacher_data, train_var

log = logging.getLogger("restorevar")

CKPT_FILES = {
    "codec": "codec.rvc",
    "transformer": "var.rva",
    "lrt": "lrt.rvl",
    "lrt_noz": "lrt_noz.rvl",
    "decoder": "decoder.rvd",
}
SEED_OFFSETS = {"train": 0, "val": 100_003, "test": 200_003}


class StageError(RuntimeError):
    """A required upstream artifact is missing or was modified."""


def ckpt_path(cfg: RunConfig, name: str) -> Path:
    return Path(cfg.out_dir) / CKPT_FILES[name]


def manifest_path(cfg: RunConfig) -> Path:
    return Path(cfg.data_dir) / "manifest.tsv"


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise StageError(f"{stage} needs {path}; run the earlier stage first")
    return path


# --------------------------------------------------------------------- load
def load_codec(cfg: RunConfig) -> Codec:
    ck = ckpt_io.load(_require(ckpt_path(cfg, "codec"), "this stage"), "codec")
    codec = Codec(ckpt_io.parse_dataclass(CodecConfig, ck.config))
    codec.load_state_dict(ck.tensors)
    codec.freeze()
    return codec


def load_transformer(cfg: RunConfig) -> ScaleAR:
    ck = ckpt_io.load(_require(ckpt_path(cfg, "transformer"), "this stage"), "transformer")
    model = ScaleAR(ckpt_io.parse_dataclass(TransformerConfig, ck.config))
    model.load_state_dict(ck.tensors)
    model.freeze()
    return model


def load_refiner(cfg: RunConfig, variant: str = "lrt") -> LRT:
    ck = ckpt_io.load(_require(ckpt_path(cfg, variant), "this stage"), "refiner")
    model = LRT(ckpt_io.parse_dataclass(LRTConfig, ck.config))
    model.load_state_dict(ck.tensors)
    model.freeze()
    return model


def load_decoder(cfg: RunConfig, codec: Codec):
    ck = ckpt_io.load(_require(ckpt_path(cfg, "decoder"), "this stage"), "decoder")
    decoder = copy.deepcopy(codec.decoder)
    decoder.load_state_dict(ck.tensors)
    decoder.freeze()
    return decoder


def _check_frozen(before: dict, modules: dict, stage: str) -> None:
    for name, mod in modules.items():
        if mod.weight_hash() != before[name]:
            raise StageError(f"{stage} modified frozen {name} weights")


# ------------------------------------------------------------------- stages
def gen_data(cfg: RunConfig) -> Path:
    splits = {
        split: make_pairs(n, cfg.image_size, cfg.seed + SEED_OFFSETS[split])
        for split, n in (("train", cfg.n_train), ("val", cfg.n_val), ("test", cfg.n_test)) if n > 0
    }
    path = write_dataset(cfg.data_dir, splits)
    log.info("wrote %s (%s)", path, ", ".join(f"{k}={len(v)}" for k, v in splits.items()))
    return path


def _split(cfg: RunConfig, split: str):
    return load_split(_require(manifest_path(cfg), "this stage"), split)


def stage_codec(cfg: RunConfig) -> Path:
    train = _split(cfg, "train")
    codec, curve = train_codec(train.clean, cfg.codec_config(), cfg.codec_train(),
                               log_fn=lambda r: log.info("codec step=%d loss=%.6f recon=%.6f", r["step"], r["loss"], r["recon"]))
    path = ckpt_path(cfg, "codec")
    ckpt_io.save(path, "codec", codec, codec.cfg, step=len(curve), seed=cfg.seed)
    log.info("saved %s", path)
    return path


def stage_transformer(cfg: RunConfig) -> Path:
    codec = load_codec(cfg)
    before = {"codec": codec.weight_hash()}
    train = _split(cfg, "train")
    data = prepare_teacher_data(codec, train.clean, train.degraded)
    model, curve = train_var(data, cfg.transformer_config(), cfg.var_train(),
                             log_fn=lambda r: log.info("var step=%d loss=%.6f", r["step"], r["loss"]))
    _check_frozen(before, {"codec": codec}, "train-var")
    path = ckpt_path(cfg, "transformer")
    ckpt_io.save(path, "transformer", model, model.cfg, step=len(curve), seed=cfg.seed)
    log.info("saved %s", path)
    return path


def refiner_training_set(codec: Codec, model: ScaleAR, clean: np.ndarray, degraded: np.ndarray,
                         batch: int = 64):
    """(predicted f_quant^(K) from a greedy rollout, clean f_cont, last-block z)."""
    f_quant, f_cont, z = [], [], []
    with no_grad():
        for i in range(0, len(clean), batch):
            f_deg = codec.encode_continuous(degraded[i:i + batch])
            maps, zb, _ = model.infer(f_deg, codec.quantizer)
            f_quant.append(codec.partial_reconstruct(maps, codec.schedule.K))
            f_cont.append(codec.encode_continuous(clean[i:i + batch]))
            z.append(zb)
    return np.concatenate(f_quant), np.concatenate(f_cont), np.concatenate(z)


def stage_refiner(cfg: RunConfig, variant: str = "lrt") -> Path:
    codec = load_codec(cfg)
    model = load_transformer(cfg)
    before = {"codec": codec.weight_hash(), "transformer": model.weight_hash()}
    train = _split(cfg, "train")
    f_quant, f_cont, z = refiner_training_set(codec, model, train.clean, train.degraded)
    use_z = variant == "lrt"
    lrt, curve = train_lrt(f_quant, f_cont, z if use_z else None, cfg.lrt_config(use_z), cfg.lrt_train(),
                           log_fn=lambda r: log.info("%s step=%d loss=%.6f", variant, r["step"], r["loss"]))
    _check_frozen(before, {"codec": codec, "transformer": model}, "train-lrt")
    path = ckpt_path(cfg, variant)
    ckpt_io.save(path, "refiner", lrt, lrt.cfg, step=len(curve), seed=cfg.seed)
    log.info("saved %s", path)
    return path


def stage_finetune(cfg: RunConfig, weights: Optional[LossWeights] = None) -> tuple[Path, dict]:
    codec = load_codec(cfg)
    for upstream in ("transformer", "lrt"):
        _require(ckpt_path(cfg, upstream), "finetune-decoder")
    train = _split(cfg, "train")
    held = _split(cfg, "test").clean if cfg.n_test else None
    weights = weights or cfg.loss_weights()
    decoder, _, curve, report = finetune_decoder(codec, train.clean, weights, cfg.finetune_train(), heldout=held,
                                                 log_fn=lambda r: log.info("finetune %s", format_log(r)))
    path = ckpt_path(cfg, "decoder")
    ckpt_io.save(path, "decoder", decoder, {"weights": ",".join(map(str, weights.as_tuple()))},
                 step=len(curve), seed=cfg.seed)
    for key, value in report.items():
        log.info("finetune %s=%.4f", key, value)
    log.info("saved %s", path)
    return path, report


# ---------------------------------------------------------------- inference
@dataclass
class Restorer:
    codec: Codec
    model: ScaleAR
    decoder: object
    refiner: Optional[LRT]
    sampling: str = "greedy"
    topk: int = 600
    temp: float = 1.0
    seed: int = 0
    step_log: Optional[Callable] = None

    def latents(self, degraded: np.ndarray) -> np.ndarray:
        """Restored continuous latent for a batch of degraded images."""
        f_deg = self.codec.encode_continuous(degraded)
        maps, z, _ = self.model.infer(f_deg, self.codec.quantizer, sampling=self.sampling, topk=self.topk,
                                      temp=self.temp, seed=self.seed, step_log=self.step_log)
        f_pred = self.codec.partial_reconstruct(maps, self.codec.schedule.K)
        if self.refiner is None:
            return f_pred
        return refine(self.refiner, f_pred, z if self.refiner.cfg.use_z else None)

    def __call__(self, degraded: np.ndarray) -> np.ndarray:
        single = degraded.ndim == 3
        x = degraded[None] if single else degraded
        with no_grad():
            out = np.clip(self.decoder(self.latents(x)).data, 0.0, 1.0)
        return out[0] if single else out


def build_restorer(cfg: RunConfig, refiner: Optional[str] = None, step_log=None) -> Restorer:
    variant = refiner or cfg.refiner
    codec = load_codec(cfg)
    return Restorer(codec, load_transformer(cfg), load_decoder(cfg, codec),
                    None if variant == "none" else load_refiner(cfg, variant),
                    cfg.sampling, cfg.topk, cfg.temp, cfg.seed, step_log)


def run_eval(cfg: RunConfig, report_path=None, refiner: Optional[str] = None, split: str = "test") -> list[dict]:
    pairs = _split(cfg, split)
    restorer = build_restorer(cfg, refiner)
    return evaluate(restorer, pairs.degraded, pairs.clean, pairs.kinds, report_path, order=KINDS)


def run_ablation(cfg: RunConfig, out_path=None) -> dict[str, list[dict]]:
    """Evaluate refiner variants none / lrt_noz / lrt on the test split."""
    for variant in ("lrt", "lrt_noz"):
        if not ckpt_path(cfg, variant).exists():
            stage_refiner(cfg, variant)
    results = {v: run_eval(cfg, refiner=v) for v in ("none", "lrt_noz", "lrt")}
    if out_path is not None:
        with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("variant,psnr,ssim\n")
            for v, rows in results.items():
                fh.write(f"{v},{rows[-1]['psnr']:.4f},{rows[-1]['ssim']:.6f}\n")
    return results


def run_all(cfg: RunConfig, ablate: bool = True) -> dict:
    """Every stage in order; returns timings, the fine-tune report and evaluation tables."""
    times = {}
    out = {"times": times}
    t0 = time.perf_counter()
    for name, fn in (("data", gen_data), ("codec", stage_codec), ("transformer", stage_transformer),
                     ("lrt", stage_refiner), ("decoder", stage_finetune)):
        t = time.perf_counter()
        result = fn(cfg)
        times[name] = time.perf_counter() - t
        if name == "decoder":
            out["finetune"] = result[1]
    t = time.perf_counter()
    out["tables"] = run_ablation(cfg) if ablate else {"lrt": run_eval(cfg)}
    times["eval"] = time.perf_counter() - t
    times["total"] = time.perf_counter() - t0
    return out


__all__ = [
    "Restorer", "StageError", "build_restorer", "ckpt_path", "gen_data", "load_codec", "load_refiner",
    "load_transformer", "read_manifest", "run_ablation", "run_all", "run_eval", "stage_codec",
    "stage_finetune", "stage_refiner", "stage_transformer", "table_csv",
]
