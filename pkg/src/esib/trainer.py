"""Dual-network mutual learning: source network (SN) and collaborator network (CN)."""

from __future__ import annotations

import copy
import json
import logging
import random
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import torch

from .corpus import ConfigError, Problem, Vocabulary
from .decoder import greedy_decode_batch
from .expr import ExprError, answers_match, evaluate, from_preorder
from .gradcheck import GradCheckReport, finite_difference_check  # noqa: F401  (re-export)
from .network import Batch, ESIBNet, ModelConfig, make_batch
from .objectives import DEFAULT_ALPHA, DEFAULT_LAMBDA, LossBreakdown, LossFlags, total_loss
from .vib import derive_seed, noise_batch

log = logging.getLogger(__name__)


class NumericalFailure(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 80
    batch_size: int = 16
    lr: float = 5e-5
    weight_decay: float = 0.01
    clip_norm: float = 5.0
    alpha: float = DEFAULT_ALPHA
    lam: float = DEFAULT_LAMBDA
    hidden_dim: int = 1024
    embedding_dim: int = 1024
    latent_dim: int = 50
    dropout: float = 0.5
    beam_size: int = 5
    val_beam_size: int = 1
    max_text_length: int = 150
    max_expr_length: int = 50
    seed: int = 0
    ablate: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "ablate", tuple(sorted(set(self.ablate))))
        LossFlags.from_ablations(self.ablate)
        for name in ("epochs", "batch_size", "hidden_dim", "embedding_dim", "latent_dim", "beam_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")

    @property
    def flags(self) -> LossFlags:
        return LossFlags.from_ablations(self.ablate)

    @property
    def model(self) -> ModelConfig:
        return ModelConfig(self.hidden_dim, self.embedding_dim, self.latent_dim, self.dropout, self.max_text_length)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ablate"] = list(self.ablate)
        return d


PRESETS = {
    "paper": TrainConfig(),
    "desk": TrainConfig(epochs=6, lr=1e-3, hidden_dim=64, embedding_dim=64, latent_dim=16),
    "tiny": TrainConfig(epochs=2, lr=1e-3, hidden_dim=8, embedding_dim=8, latent_dim=4, dropout=0.0),
}


def preset(name: str, **overrides) -> TrainConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(base, **overrides)


@dataclass
class DualNetworks:
    sn: ESIBNet
    cn: ESIBNet
    opt_sn: torch.optim.Optimizer
    opt_cn: torch.optim.Optimizer
    sn_seed: int
    cn_seed: int

    @classmethod
    def create(cls, vocab: Vocabulary, config: TrainConfig, dtype=torch.float32) -> "DualNetworks":
        sn_seed = derive_seed(config.seed, "SN")
        cn_seed = derive_seed(config.seed, "CN")
        nets = []
        for s in (sn_seed, cn_seed):
            net = ESIBNet(vocab, config.model).to(dtype)
            net.reset_parameters(s)
            nets.append(net)
        opts = [
            torch.optim.AdamW(n.parameters(), lr=config.lr, weight_decay=config.weight_decay) for n in nets
        ]
        return cls(nets[0], nets[1], opts[0], opts[1], sn_seed, cn_seed)


def _noise(net_seed: int, batch: Batch, step_key: int, config: TrainConfig, dtype) -> torch.Tensor | None:
    if not config.flags.vib:
        return None
    return noise_batch(net_seed, batch.ids, step_key, config.latent_dim, dtype)


def _check_finite(name: str, parts: LossBreakdown, batch: Batch) -> None:
    values = parts.to_dict()
    if not all(map(lambda v: v == v and abs(v) != float("inf"), values.values())):
        raise NumericalFailure(f"{name} loss not finite on batch {batch.ids}: {values}")


def _update(net: ESIBNet, opt: torch.optim.Optimizer, loss: torch.Tensor, clip: float) -> None:
    opt.zero_grad(set_to_none=True)
    loss.backward()
    torch.nn.utils.clip_grad_norm_(net.parameters(), clip)
    opt.step()


def mutual_step(
    batch: Batch, nets: DualNetworks, config: TrainConfig, step_key: int = 0
) -> tuple[LossBreakdown, LossBreakdown]:
    """One alternating iteration.

    SN runs first; its (detached) trace is CN's partner.  CN is updated,
    re-run under no_grad, and that post-update trace is SN's partner.
    SN's parameters do not change between its forward pass and its own
    update, so the first forward pass doubles as SN's training pass.
    """
    flags = config.flags
    dtype = next(nets.sn.parameters()).dtype
    eps_sn = _noise(nets.sn_seed, batch, step_key, config, dtype)
    eps_cn = _noise(nets.cn_seed, batch, step_key, config, dtype)
    nets.sn.train()
    nets.cn.train()

    out_sn = nets.sn(batch, eps_sn)
    out_cn = nets.cn(batch, eps_cn)
    partner_for_cn = out_sn.trace.detach() if flags.mt else None
    loss_cn = total_loss(
        out_cn.trace, out_cn.latent.mu, out_cn.latent.sigma, out_cn.latent.initial_state,
        partner_for_cn, flags, config.lam, config.alpha,
    )
    _check_finite("CN", loss_cn, batch)
    _update(nets.cn, nets.opt_cn, loss_cn.total, config.clip_norm)

    partner_for_sn = None
    if flags.mt:
        with torch.no_grad():
            partner_for_sn = nets.cn(batch, eps_cn).trace
    loss_sn = total_loss(
        out_sn.trace, out_sn.latent.mu, out_sn.latent.sigma, out_sn.latent.initial_state,
        partner_for_sn, flags, config.lam, config.alpha,
    )
    _check_finite("SN", loss_sn, batch)
    _update(nets.sn, nets.opt_sn, loss_sn.total, config.clip_norm)
    return loss_sn, loss_cn


@torch.no_grad()
def predict_greedy(net: ESIBNet, problems: Sequence[Problem], max_len: int = 50, chunk: int = 256):
    """Greedy top-1 token sequences for many problems (deterministic, z = mu)."""
    was_training = net.training
    net.eval()
    out = []
    for i in range(0, len(problems), chunk):
        part = problems[i : i + chunk]
        batch = make_batch(part, net.vocab, net.config.max_text_length, with_targets=False)
        enc = net.encode(batch)
        latent = net.compressor(enc.pooled, None)
        out.extend(greedy_decode_batch(net.decoder, enc, latent.initial_state, max_len))
    net.train(was_training)
    return out


def answer_accuracy(net: ESIBNet, problems: Sequence[Problem], max_len: int = 50) -> float:
    if not problems:
        return 0.0
    correct = 0
    for p, toks in zip(problems, predict_greedy(net, problems, max_len)):
        try:
            tree = from_preorder([net.output_token(t) for t in toks])
            correct += answers_match(evaluate(tree, p.qmap), p.answer)
        except ExprError:
            pass
    return correct / len(problems)


@dataclass
class TrainResult:
    nets: DualNetworks
    metrics: list[dict]
    best: dict[str, dict] = field(default_factory=dict)
    best_val: dict[str, float] = field(default_factory=dict)
    timings: list[float] = field(default_factory=list)

    def best_network(self, which: str = "cn") -> ESIBNet:
        net = copy.deepcopy(getattr(self.nets, which))
        if which in self.best:
            net.load_state_dict(self.best[which])
        net.eval()
        return net


def _round(x: float) -> float:
    return float(f"{x:.10g}")


def train(
    train_set: Sequence[Problem],
    val_set: Sequence[Problem],
    config: TrainConfig,
    out_dir: str | Path | None = None,
    vocab: Vocabulary | None = None,
) -> TrainResult:
    """Train SN and CN together.

    One JSON record per epoch goes to ``metrics.jsonl`` (the CN loss
    components, SN's under ``sn_*``, and validation answer accuracy of
    both).  Wall-clock times go to ``timing.jsonl`` so the metrics stream
    stays byte-identical across identical runs.
    """
    if not train_set:
        raise ConfigError("training corpus is empty")
    torch.manual_seed(derive_seed(config.seed, "torch") % (2**63))
    vocab = vocab or Vocabulary.build(train_set)
    nets = DualNetworks.create(vocab, config)
    result = TrainResult(nets, [])
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        for name in ("metrics.jsonl", "timing.jsonl"):
            (out / name).write_text("")
    order = list(range(len(train_set)))
    step_key = 0
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        random.Random(derive_seed(config.seed, "shuffle", epoch)).shuffle(order)
        sums: dict[str, float] = {}
        n_batches = 0
        for i in range(0, len(order), config.batch_size):
            batch = make_batch([train_set[j] for j in order[i : i + config.batch_size]], vocab, config.max_text_length)
            loss_sn, loss_cn = mutual_step(batch, nets, config, step_key=epoch)
            step_key += 1
            for prefix, parts in (("", loss_cn), ("sn_", loss_sn)):
                for k, v in parts.to_dict().items():
                    if k in ("lam", "alpha"):
                        continue
                    sums[prefix + k] = sums.get(prefix + k, 0.0) + v
            n_batches += 1
        record = {"epoch": epoch}
        for k in ("nll", "kl", "skl", "sdl", "total", "sn_nll", "sn_kl", "sn_skl", "sn_sdl", "sn_total"):
            record[k] = _round(sums[k] / n_batches)
        for which in ("sn", "cn"):
            acc = answer_accuracy(getattr(nets, which), val_set, config.max_expr_length) if val_set else 0.0
            record[f"val_answer_acc_{which}"] = _round(acc)
            if acc > result.best_val.get(which, -1.0):
                result.best_val[which] = acc
                result.best[which] = copy.deepcopy(getattr(nets, which).state_dict())
                if out is not None:
                    _save_net(getattr(nets, which), out / f"{which}_best.npz", config, epoch, acc)
        elapsed = time.perf_counter() - t0
        result.metrics.append(record)
        result.timings.append(elapsed)
        log.info("epoch %d %s", epoch, record)
        if out is not None:
            with (out / "metrics.jsonl").open("a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
            with (out / "timing.jsonl").open("a") as fh:
                fh.write(json.dumps({"epoch": epoch, "wall_time_s": round(elapsed, 3)}) + "\n")
    if out is not None:
        for which in ("sn", "cn"):
            _save_net(getattr(nets, which), out / f"{which}_final.npz", config, config.epochs, None)
    return result


def _save_net(net: ESIBNet, path: Path, config: TrainConfig, epoch: int, val_acc: float | None) -> None:
    net.save(path, extra={"train_config": config.to_dict(), "epoch": epoch, "val_answer_acc": val_acc})
