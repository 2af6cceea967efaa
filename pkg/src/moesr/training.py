"""End-to-end pipeline: dataset generation, codec pretraining, joint
training, inference, evaluation, difference maps, cost reports, ablations.

Determinism contract: every source of randomness is a fresh Generator
seeded from a SeedSequence of (seed, purpose, counters...), so any state
can be reconstructed from the saved (seed, epoch, step) alone:

    [seed, 0]              model initialization (fixed construction order)
    [seed, 1, epoch]       data order
    [seed, 2, epoch, step] per-expert timestep draws
    [seed, 3, epoch, step] diffusion noise
    [seed, 4, step]        codec pretrain batch choice
    [seed, 6, example]     inference chain start
    [seed, 7, step]        codebook revival draws

Training logs hold only run-content (no wall-clock), so identical runs
produce byte-identical CSVs; timing goes to stderr.
"""

from __future__ import annotations

import json
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import apply_to_bundle, read_checkpoint, save_checkpoint
from .codec import VQCodec
from .conditioner import CondEncoder
from .config import TrainConfig
from .dataio import load_split, write_dataset, write_pgm
from .experts import (CondProjector, GlobalExpert, ModelBundle, SmoothExpert,
                      TextureExpert, predict_eps, sample)
from .gating import Gate, UsageState, warmup_gate
from .losses import (FixedPerceptualBank, LossReport, VarianceTracker,
                     diffusion_loss, expert_losses, gating_loss,
                     supervised_gate_targets, task_edge_freq, task_recon,
                     task_stft, total_loss, uncertainty_weight)
from .metrics import psnr, rmse, ssim
from .nn import TouchRecorder, track_touches
from .optim import AdamW, ramp_lr
from .phantoms import PhantomSpec, make_pair, spec_to_dict
from .resize import resize_bilinear, upsample_bicubic
from .schedules import estimate_clean, forward_noise, linear_schedule

N_EXPERTS = 3
CODEC_CKPT = "codec.bin"
FINAL_CKPT = "ckpt_final.bin"
LOG_NAME = "train_log.csv"


class TrainingAborted(RuntimeError):
    """Raised when a step produces a non-finite value; carries the path of
    the last checkpoint known to be good (or None)."""

    def __init__(self, message: str, checkpoint: str | None):
        super().__init__(message)
        self.checkpoint = checkpoint


def _stream(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(key)))


# --------------------------------------------------------------------------
# dataset
# --------------------------------------------------------------------------

def generate_dataset(out_dir: str, n: int, base_seed: int,
                     spec: PhantomSpec | None = None,
                     val_frac: float = 0.25) -> dict:
    """Create n phantom pairs (seeds base_seed..base_seed+n-1) and write
    them with a train/val split manifest."""
    if n < 1:
        raise ValueError("need at least one pair")
    spec = spec or PhantomSpec()
    spec.validate()
    pairs = {base_seed + i: make_pair(base_seed + i, spec) for i in range(n)}
    seeds = sorted(pairs)
    n_val = int(round(n * val_frac))
    if n_val >= n:
        n_val = n - 1
    splits = {"train": seeds[: n - n_val], "val": seeds[n - n_val:]}
    write_dataset(out_dir, spec_to_dict(spec), pairs, splits)
    return splits


def _load_pairs(data_dir: str, split: str):
    seeds, records = load_split(data_dir, split)
    if not seeds:
        raise ValueError(f"split {split!r} in {data_dir} is empty")
    return seeds, records


# --------------------------------------------------------------------------
# model assembly
# --------------------------------------------------------------------------

def build_bundle(cfg: TrainConfig, rng: np.random.Generator | None = None
                 ) -> ModelBundle:
    """Construct every module in a fixed order from the [seed, 0] stream."""
    rng = rng or _stream(cfg.seed, 0)
    codec = VQCodec(rng, base=cfg.codec_base, code_dim=cfg.code_dim,
                    codebook_size=cfg.codebook_size,
                    scale_factor=cfg.scale_factor,
                    commit_beta=cfg.commit_beta)
    cond = CondEncoder(rng, input_size=cfg.hr_size,
                       patch_sizes=tuple(cfg.patch_sizes), dim=cfg.embed_dim,
                       window=cfg.window, heads=cfg.heads, depth=cfg.depth)
    projector = CondProjector(cfg.embed_dim, cfg.cond_channels, rng)
    gate = Gate(rng, dim=cfg.embed_dim, n_experts=N_EXPERTS, gamma=cfg.gamma)
    in_ch = cfg.code_dim + cfg.cond_channels + 1
    experts = [SmoothExpert(in_ch, cfg.code_dim, rng, base=cfg.expert_base),
               TextureExpert(in_ch, cfg.code_dim, rng, base=cfg.expert_base),
               GlobalExpert(in_ch, cfg.code_dim, rng, base=cfg.expert_base)]
    schedules = [linear_schedule(t) for t in cfg.timesteps]
    usage = np.full(N_EXPERTS, 1.0 / N_EXPERTS)
    return ModelBundle(codec=codec, cond=cond, projector=projector,
                       gate=gate, experts=experts, schedules=schedules,
                       usage=usage)


def load_model(path: str) -> tuple[ModelBundle, TrainConfig]:
    data = read_checkpoint(path)
    bundle = build_bundle(data.config)
    apply_to_bundle(data, bundle)
    return bundle, data.config


def conditioning_channels(record: dict, cfg: TrainConfig
                          ) -> tuple[np.ndarray, np.ndarray]:
    """Bias/warp maps as encoder channels; ablated fields are replaced by
    their information-free neutral values (bias 1, displacement 0)."""
    h = record["hr"].shape[-1]
    if cfg.use_bias_field:
        bias = record["bias"].reshape(1, h, h)
    else:
        bias = np.ones((1, h, h))
    if cfg.use_warp_field:
        warp = record["warp"].reshape(2, h, h)
    else:
        warp = np.zeros((2, h, h))
    return bias, warp


# --------------------------------------------------------------------------
# codec pretraining
# --------------------------------------------------------------------------

def pretrain_codec(bundle: ModelBundle, cfg: TrainConfig, records: list[dict],
                   log=sys.stderr) -> float:
    """Reconstruction + codebook objectives on the HR images; returns the
    final mean reconstruction PSNR over the given records."""
    codec = bundle.codec
    opt = AdamW(codec.parameters(), lr=cfg.codec_lr)
    n = len(records)
    xs = np.stack([r["hr"] for r in records])[:, None]          # [n,1,H,W]
    conds = [conditioning_channels(r, cfg) for r in records]
    biases = np.stack([c[0] for c in conds])
    warps = np.stack([c[1] for c in conds])

    t0 = time.time()
    for step in range(cfg.codec_steps):
        rng = _stream(cfg.seed, 4, step)
        idx = rng.permutation(n)[: min(cfg.batch_size, n)]
        x = Tensor(xs[idx])
        z = codec.encode(x, Tensor(biases[idx]), Tensor(warps[idx]))
        z_q, codes, l_code, l_commit = codec.quantize(z)
        x_hat = codec.decode(z_q, quantized=False)
        recon = ad.mean((x_hat - x) ** 2)
        loss = recon + l_code + l_commit
        opt.zero_grad()
        ad.backward(loss)
        opt.step()
        ad.clear_tape()
        codec.note_usage(codes)
        if (step + 1) % 100 == 0:
            revived = codec.revive_dead_codes(Tensor(z.data),
                                              _stream(cfg.seed, 7, step))
            print(f"codec step {step + 1}/{cfg.codec_steps} "
                  f"recon {recon.item():.5f} revived {revived} "
                  f"[{time.time() - t0:.1f}s]", file=log)
    return codec_psnr(bundle, cfg, records)


def codec_psnr(bundle: ModelBundle, cfg: TrainConfig,
               records: list[dict]) -> float:
    """Mean PSNR of quantized round-trip reconstructions."""
    vals = []
    with ad.no_grad():
        for r in records:
            bias, warp = conditioning_channels(r, cfg)
            z = bundle.codec.encode(Tensor(r["hr"][None, None]),
                                    Tensor(bias[None]), Tensor(warp[None]))
            x_hat = bundle.codec.decode(z, clamp=True, quantized=True)
            vals.append(psnr(x_hat.data[0, 0], r["hr"]))
    ad.clear_tape()
    return float(np.mean(vals))


def encode_latents(bundle: ModelBundle, cfg: TrainConfig,
                   records: list[dict]) -> np.ndarray:
    """Frozen-codec quantized latents for every record: [n, C, h, w]."""
    outs = []
    with ad.no_grad():
        for r in records:
            bias, warp = conditioning_channels(r, cfg)
            z = bundle.codec.encode(Tensor(r["hr"][None, None]),
                                    Tensor(bias[None]), Tensor(warp[None]))
            z_q, _, _, _ = bundle.codec.quantize(z)
            outs.append(z_q.data[0])
    ad.clear_tape()
    return np.stack(outs)


# --------------------------------------------------------------------------
# joint training
# --------------------------------------------------------------------------

_CSV_COLUMNS = (["epoch", "step", "lr", "t0", "t1", "t2"]
                + [f"diff{i}" for i in range(N_EXPERTS)]
                + [f"task{i}" for i in range(N_EXPERTS)]
                + ["expert", "supervised", "diversity", "gating", "weight",
                   "total", "t_mad"]
                + [f"g{i}" for i in range(N_EXPERTS)]
                + [f"usage{i}" for i in range(N_EXPERTS)])


def train(cfg: TrainConfig, data_dir: str, out_dir: str,
          codec_path: str | None = None, log=sys.stderr) -> str:
    """Joint training of conditioner, gate, and experts over a frozen
    codec.  Returns the final checkpoint path."""
    os.makedirs(out_dir, exist_ok=True)
    codec_path = codec_path or os.path.join(out_dir, CODEC_CKPT)
    if not os.path.exists(codec_path):
        raise ValueError(
            f"codec checkpoint {codec_path!r} not found; run train-codec first")
    _, records = _load_pairs(data_dir, "train")

    data = read_checkpoint(codec_path)
    bundle = build_bundle(cfg)
    apply_to_bundle(data, bundle)

    z0_all = encode_latents(bundle, cfg, records)               # [n,C,h,w]
    size = cfg.hr_size
    y_up = np.stack([resize_bilinear(r["lr"], (size, size))
                     for r in records])[:, None]                # [n,1,S,S]

    usage = UsageState(N_EXPERTS, decay=cfg.usage_decay)
    usage.counts = bundle.usage.copy()
    tracker = VarianceTracker(cfg.var_decay)
    opt = AdamW(bundle.trainable_parameters(), lr=cfg.base_lr,
                weight_decay=cfg.weight_decay)

    n = len(records)
    log_path = os.path.join(out_dir, LOG_NAME)
    last_ckpt: str | None = None
    global_step = 0
    t_start = time.time()

    with open(log_path, "w", encoding="utf-8", newline="\n") as csv:
        csv.write(",".join(_CSV_COLUMNS) + "\n")
        for epoch in range(cfg.epochs):
            perm = _stream(cfg.seed, 1, epoch).permutation(n)
            for lo in range(0, n, cfg.batch_size):
                batch = perm[lo: lo + cfg.batch_size]
                try:
                    row = _train_step(bundle, cfg, opt, usage, tracker,
                                      z0_all[batch], y_up[batch],
                                      epoch, global_step)
                except FloatingPointError as exc:
                    ad.clear_tape()
                    raise TrainingAborted(
                        f"non-finite value at epoch {epoch}: {exc}; "
                        f"last good checkpoint: {last_ckpt}", last_ckpt
                    ) from exc
                csv.write(",".join(repr(v) for v in row) + "\n")
                global_step += 1
            if (epoch + 1) % cfg.ckpt_every == 0 or epoch + 1 == cfg.epochs:
                bundle.usage = usage.counts.copy()
                path = os.path.join(out_dir, f"ckpt_ep{epoch + 1:05d}.bin")
                save_checkpoint(path, bundle, cfg, epoch + 1, tracker, opt)
                usage.counts = bundle.usage.copy()
                last_ckpt = path
            if (epoch + 1) % 50 == 0 or epoch + 1 == cfg.epochs:
                print(f"epoch {epoch + 1}/{cfg.epochs} "
                      f"[{time.time() - t_start:.1f}s]", file=log)

    final = os.path.join(out_dir, FINAL_CKPT)
    bundle.usage = usage.counts.copy()
    save_checkpoint(final, bundle, cfg, cfg.epochs, tracker, opt)
    return final


def _train_step(bundle, cfg, opt, usage, tracker, z0_np, y_np,
                epoch, global_step):
    b = z0_np.shape[0]
    z0 = Tensor(z0_np)
    tokens = bundle.cond(Tensor(y_np))
    gates_raw, _, _, _ = bundle.gate(tokens, usage.vector())
    g_used = warmup_gate(gates_raw, epoch, cfg.warmup_gate_epochs)
    cond_map = bundle.projector(bundle.cond.fine_tokens(tokens))

    t_rng = _stream(cfg.seed, 2, epoch, global_step)
    n_rng = _stream(cfg.seed, 3, epoch, global_step)
    ts = [int(t_rng.integers(1, sched.t_max, endpoint=True))
          for sched in bundle.schedules]

    diffs, tasks, z0_hats = [], [], []
    task_fns = [lambda zh: task_recon(zh, z0, _BANK, batched=True),
                lambda zh: task_edge_freq(zh, z0, batched=True),
                lambda zh: task_stft(zh, z0, batched=True)]
    for i in range(N_EXPERTS):
        sched = bundle.schedules[i]
        z_t, eps = forward_noise(z0, ts[i], sched, n_rng)
        eps_hat = predict_eps(bundle.experts[i], z_t, cond_map,
                              g_used[:, i: i + 1], ts[i])
        z0_hat = estimate_clean(z_t, eps_hat, ts[i], sched)
        diffs.append(diffusion_loss(eps_hat, eps, batched=True))
        tasks.append(task_fns[i](z0_hat))
        z0_hats.append(z0_hat)

    l_expert, _ = expert_losses(diffs, tasks, g_used)
    g_star, t_mad, _ = supervised_gate_targets(z0_hats, z0)
    l_gate, l_sup, l_div = gating_loss(g_used, g_star, z0_hats)
    w = uncertainty_weight(tracker, l_gate.item())
    loss = total_loss(l_expert, l_gate, w)

    report = LossReport(
        diffusion=[d.data.mean().item() for d in diffs],
        task=[t.data.mean().item() for t in tasks],
        expert=l_expert.item(), supervised=l_sup.item(),
        diversity=l_div.item(), gating=l_gate.item(), weight=w,
        total=loss.item(), t_mad=t_mad.item())
    report.validate()

    lr = ramp_lr(cfg.base_lr, global_step, cfg.lr_period, cfg.lr_repeat)
    opt.zero_grad()
    ad.backward(loss)
    opt.step(lr=lr)
    ad.clear_tape()
    if epoch >= cfg.warmup_gate_epochs:
        usage.update(g_used.data)

    g_mean = g_used.data.mean(axis=0)
    return ([epoch, global_step, lr] + ts + report.diffusion + report.task
            + [report.expert, report.supervised, report.diversity,
               report.gating, report.weight, report.total, report.t_mad]
            + [float(g) for g in g_mean]
            + [float(u) for u in usage.vector()])


_BANK = FixedPerceptualBank()


# --------------------------------------------------------------------------
# inference / evaluation
# --------------------------------------------------------------------------

def infer_one(bundle: ModelBundle, cfg: TrainConfig, y_lr: np.ndarray,
              example_id: int, top_k: int | None = None,
              per_step_mix: bool | None = None,
              select: tuple[int, ...] | None = None) -> dict:
    rng = _stream(cfg.seed, 6, example_id)
    return sample(bundle, y_lr, rng,
                  top_k=cfg.top_k if top_k is None else top_k,
                  per_step_mix=(cfg.per_step_mix if per_step_mix is None
                                else per_step_mix),
                  start=cfg.start_mode, select=select)


def evaluate(bundle: ModelBundle, cfg: TrainConfig, data_dir: str,
             split: str, top_k: int | None = None) -> dict:
    """PSNR/SSIM/RMSE per example plus the bicubic-upsampling baseline."""
    seeds, records = _load_pairs(data_dir, split)
    examples = []
    for seed, rec in zip(seeds, records):
        out = infer_one(bundle, cfg, rec["lr"], seed, top_k=top_k)
        hr = rec["hr"]
        base = upsample_bicubic(rec["lr"], hr.shape[0] / rec["lr"].shape[0])
        examples.append({
            "seed": int(seed),
            "psnr": psnr(out["sr"], hr),
            "ssim": ssim(out["sr"], hr),
            "rmse": rmse(out["sr"], hr),
            "psnr_bicubic": psnr(base, hr),
            "ssim_bicubic": ssim(base, hr),
            "gates": [float(g) for g in out["gates"]],
        })
    agg = {k: float(np.mean([e[k] for e in examples]))
           for k in ("psnr", "ssim", "rmse", "psnr_bicubic", "ssim_bicubic")}
    gate_mat = np.array([e["gates"] for e in examples])
    return {"split": split, "n": len(examples), "examples": examples,
            "aggregate": agg,
            "gate_mean": [float(g) for g in gate_mat.mean(axis=0)],
            "usage": [float(u) for u in bundle.usage]}


def _region_masks(hr: np.ndarray) -> dict[str, np.ndarray]:
    """Coarse tissue-archetype masks from the ground truth: bright ribbon,
    low-gradient smooth interior, and the high-gradient interface rest."""
    gy, gx = np.gradient(hr)
    grad = np.hypot(gy, gx)
    ribbon = hr >= 0.7
    smooth = (~ribbon) & (grad <= np.quantile(grad, 0.3))
    interface = ~(ribbon | smooth)
    return {"smooth": smooth, "ribbon": ribbon, "interface": interface}


def diffmap(bundle: ModelBundle, cfg: TrainConfig, rec: dict,
            example_id: int, out_dir: str | None = None) -> dict:
    """Per-expert solo reconstructions: |x_hat_i - hr| maps, their mean
    energies, and mean energy within each region mask."""
    hr = rec["hr"]
    masks = _region_masks(hr)
    full = infer_one(bundle, cfg, rec["lr"], example_id)
    result = {"gates": [float(g) for g in full["gates"]],
              "experts": []}
    for i in range(N_EXPERTS):
        solo = infer_one(bundle, cfg, rec["lr"], example_id, select=(i,))
        dmap = np.abs(solo["sr"] - hr)
        entry = {"expert": i, "energy": float(dmap.mean()),
                 "regions": {name: float(dmap[m].mean()) if m.any() else 0.0
                             for name, m in masks.items()}}
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            write_pgm(os.path.join(out_dir, f"diff_e{i}_{example_id}.pgm"),
                      dmap)
        result["experts"].append(entry)
    return result


# --------------------------------------------------------------------------
# cost accounting
# --------------------------------------------------------------------------

def report_cost(bundle: ModelBundle, cfg: TrainConfig,
                top_k: int | None = None,
                selected: tuple[int, ...] | None = None) -> dict:
    """Static parameter/MAC accounting for full or top-k routed inference.

    Without an explicit selection, routed cost quotes the most expensive
    expert subset (worst case)."""
    lat = cfg.hr_size // 4
    decoder_params = int(sum(p.size for p in bundle.codec.decoder_params()))
    shared_params = (decoder_params + bundle.cond.param_count()
                     + bundle.projector.param_count()
                     + bundle.gate.param_count())
    expert_params = [e.param_count() for e in bundle.experts]
    expert_step_macs = [e.macs(lat) for e in bundle.experts]
    chain_macs = [m * s.t_max
                  for m, s in zip(expert_step_macs, bundle.schedules)]
    shared_macs = (bundle.cond.macs() + bundle.projector.macs((lat, lat))
                   + bundle.gate.macs(bundle.cond.token_count)
                   + bundle.codec.macs(cfg.hr_size)["decode"])

    k = len(bundle.experts) if top_k is None else top_k
    if selected is None:
        order = np.argsort(chain_macs)[::-1]
        active = tuple(int(i) for i in order[:k])
    else:
        active = tuple(selected)
    return {
        "mode": "full" if k >= len(bundle.experts) else f"async({k})",
        "active_experts": list(active),
        "params": {
            "shared": shared_params,
            "experts": expert_params,
            "total_full": shared_params + sum(expert_params),
            "total_active": shared_params + sum(expert_params[i]
                                                for i in active),
        },
        "macs": {
            "shared": int(shared_macs),
            "expert_step": [int(m) for m in expert_step_macs],
            "expert_chain": [int(m) for m in chain_macs],
            "total_full": int(shared_macs + sum(chain_macs)),
            "total_active": int(shared_macs + sum(chain_macs[i]
                                                  for i in active)),
        },
    }


def cost_table(report: dict) -> str:
    lines = [f"mode: {report['mode']}  active experts: "
             f"{report['active_experts']}",
             f"{'component':<12} {'params':>12} {'chain MACs':>16}"]
    p, m = report["params"], report["macs"]
    lines.append(f"{'shared':<12} {p['shared']:>12} {m['shared']:>16}")
    for i, (ep, em) in enumerate(zip(p["experts"], m["expert_chain"])):
        tag = "*" if i in report["active_experts"] else " "
        lines.append(f"expert{i}{tag:<5} {ep:>12} {em:>16}")
    lines.append(f"{'TOTAL full':<12} {p['total_full']:>12} "
                 f"{m['total_full']:>16}")
    lines.append(f"{'TOTAL active':<12} {p['total_active']:>12} "
                 f"{m['total_active']:>16}")
    return "\n".join(lines)


def touch_count(bundle: ModelBundle, cfg: TrainConfig, y_lr: np.ndarray,
                top_k: int | None = None) -> tuple[int, tuple[int, ...]]:
    """Instrumented unique-parameter count for one routed inference call."""
    rec = TouchRecorder()
    with track_touches(rec):
        out = sample(bundle, y_lr, _stream(cfg.seed, 6, 0), top_k=top_k,
                     start=cfg.start_mode)
    return rec.total(), tuple(int(i) for i in out["selected"])


# --------------------------------------------------------------------------
# ablation harness
# --------------------------------------------------------------------------

def run_ablation(cfg: TrainConfig, data_dir: str, out_dir: str,
                 log=sys.stderr) -> dict:
    """Train the four {bias on/off} x {warp on/off} arms end to end and
    collect their gating-loss curves for side-by-side comparison."""
    arms = {}
    for use_b in (True, False):
        for use_w in (True, False):
            name = f"b{int(use_b)}g{int(use_w)}"
            arm_cfg = replace(cfg, use_bias_field=use_b, use_warp_field=use_w)
            arm_dir = os.path.join(out_dir, name)
            os.makedirs(arm_dir, exist_ok=True)
            print(f"[ablation {name}] codec pretrain", file=log)
            bundle = build_bundle(arm_cfg)
            _, records = _load_pairs(data_dir, "train")
            pretrain_codec(bundle, arm_cfg, records, log=log)
            tracker = VarianceTracker(arm_cfg.var_decay)
            save_checkpoint(os.path.join(arm_dir, CODEC_CKPT), bundle,
                            arm_cfg, 0, tracker)
            print(f"[ablation {name}] train", file=log)
            train(arm_cfg, data_dir, arm_dir, log=log)
            curve = _gating_curve(os.path.join(arm_dir, LOG_NAME))
            arms[name] = curve
    summary = {name: {"first": curve[0], "last": curve[-1],
                      "mean_last_50": float(np.mean(curve[-50:]))}
               for name, curve in arms.items()}
    with open(os.path.join(out_dir, "ablation.json"), "w",
              encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)
    return {"curves": arms, "summary": summary}


def _gating_curve(log_path: str) -> list[float]:
    col = _CSV_COLUMNS.index("gating")
    out = []
    with open(log_path, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            out.append(float(line.split(",")[col]))
    return out
