"""Training: joint NLL + coverage loss, teacher forcing, checkpoints, experiments.

The loop owns the parameters (single writer): per epoch it shuffles the
training split with an epoch-derived RNG stream, accumulates the batch
loss under one tape, clips the global gradient norm, applies Adam, then
scores the validation split (teacher-forced loss plus greedy-decode ROUGE)
with dropout disabled. All randomness is derived from (seed, purpose,
epoch), so a run can be stopped at an epoch boundary and resumed
bit-identically.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tape, Tensor
from .config import ConfigError, TrainConfig
from .corpus import (
    EncodedExample,
    PatentRecord,
    Vocabulary,
    decode_extended,
    encode_example,
    tokenize,
)
from .decoder import (
    AttentionParams,
    ModelParams,
    PointerParams,
    advance,
    decode_sequence,
    encode_sources,
    initial_state,
)
from .encoders import GruCellParams, SlaveGateParams
from .rouge import CorpusRouge, evaluate_corpus


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; the last good checkpoint survives."""


CHECKPOINT_FORMAT = "patentsum-checkpoint-1"


# ---------------------------------------------------------------------------
# Parameter initialization
# ---------------------------------------------------------------------------


def init_model_params(
    cfg: TrainConfig, vocab_size: int, rng: np.random.Generator | None = None
) -> ModelParams:
    """Uniformly initialized parameters in [-init_range, init_range]."""
    cfg.validate()
    rng = rng if rng is not None else np.random.default_rng([cfg.seed, 0])
    dtype = np.float32 if cfg.dtype == "float32" else np.float64

    def u(*shape: int) -> Tensor:
        data = rng.uniform(-cfg.init_range, cfg.init_range, size=shape).astype(dtype)
        return ad.tensor(data, track=True)

    e, mh, sh, dh = cfg.embedding, cfg.hidden_master, cfg.hidden_slave, cfg.hidden_decoder
    d_c, attn = cfg.d_c, cfg.attention_width

    def gru(hidden: int, input_dim: int) -> GruCellParams:
        return GruCellParams(
            W_u=u(hidden, input_dim + hidden),
            W_r=u(hidden, input_dim + hidden),
            W_h=u(hidden, input_dim + hidden),
        )

    params = ModelParams(
        embedding=u(vocab_size, e),
        master_fwd=gru(mh, e),
        master_bwd=gru(mh, e),
        W_p=u(d_c, 2 * mh),
        b_p=u(d_c, 1),
        claims_fwd=gru(mh, e),
        claims_bwd=gru(mh, e),
        W_q=u(d_c, 2 * mh),
        b_q=u(d_c, 1),
        gate=SlaveGateParams(
            W_1=u(sh, 2 * mh + 3 * d_c),
            b_1=u(sh, 1),
            W_2=u(1, sh),
            b_2=u(1, 1),
            W_s=u(2 * mh, d_c),
            W_r=u(d_c, d_c),
            W_k=u(d_c, 1),
            W_s_untied=u(2 * mh, d_c) if cfg.untie_ws else None,
        ),
        slave_gru=gru(sh, e),
        dec_gru=gru(dh, e),
        P_f=u(dh, dh + sh),
        P_0=u(dh, 2 * mh),
        attn=AttentionParams(
            v_a=u(1, attn),
            W_a=u(attn, dh),
            U_a=u(attn, 2 * mh),
            W_c=u(attn, 1),
        ),
        W_v=u(vocab_size, dh + 2 * mh),
        b_v=u(vocab_size, 1),
        pointer=PointerParams(
            w_c=u(2 * mh, 1), w_h=u(dh, 1), w_y=u(e, 1), w_d=u(d_c, 1), b_g=u(1, 1)
        ),
        W_d=u(d_c, 2 * mh if cfg.cd_from_source else dh),
        b_d=u(d_c, 1),
    )
    if not np.abs(params.attn.v_a.data).max() > 0:
        raise ConfigError("attention vector initialized to all zeros; re-seed")
    return params


# ---------------------------------------------------------------------------
# Data preparation
# ---------------------------------------------------------------------------


def encode_for_config(record: PatentRecord, vocab: Vocabulary, cfg: TrainConfig) -> EncodedExample:
    """Encode one record under the source-selection flags.

    In claims-only mode the claims text becomes the (single) master source,
    so the pointer copies from claims and the secondary pathway is off.
    """
    if cfg.use_claims and not cfg.use_spec:
        record = PatentRecord(
            title=record.title,
            publication_number=record.publication_number,
            abstract=record.abstract,
            specification=record.claims,
            claims="",
        )
    return encode_example(record, vocab, cfg.tokenizer, cfg.max_in, cfg.max_out)


@dataclass
class TrainData:
    """Encoded splits plus what validation scoring needs."""

    train: list[EncodedExample]
    validation: list[EncodedExample]
    vocab: Vocabulary
    val_references: list[list[str]]


def prepare_data(
    train_records: Sequence[PatentRecord],
    val_records: Sequence[PatentRecord],
    vocab: Vocabulary,
    cfg: TrainConfig,
) -> TrainData:
    return TrainData(
        train=[encode_for_config(r, vocab, cfg) for r in train_records],
        validation=[encode_for_config(r, vocab, cfg) for r in val_records],
        vocab=vocab,
        val_references=[tokenize(r.abstract, cfg.tokenizer) for r in val_records],
    )


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


@dataclass
class ExampleDiagnostics:
    publication_number: str
    loss: float
    nll: float
    coverage_penalty: float
    steps: int


def example_loss(
    example: EncodedExample,
    params: ModelParams,
    cfg: TrainConfig,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, ExampleDiagnostics]:
    """Teacher-forced per-token loss for one example.

    Averages NLL plus the weighted coverage penalty over the target
    positions (gold tokens and STOP). Inputs are base-vocabulary ids (OOV
    feeds the UNK embedding); targets are extended ids when the pointer is
    on, base ids otherwise.
    """
    inputs = example.summary_ids[:-1]
    targets = (example.summary_extended_ids if cfg.pointer else example.summary_ids)[1:]
    T = len(targets)
    if T == 0:
        raise ConfigError(f"{example.publication_number}: empty target sequence")
    src = encode_sources(params, cfg, example, rng=rng)
    for gold in targets:
        limit = src.extended_size if cfg.pointer else params.vocab_size()
        if gold >= limit:
            raise ConfigError(
                f"{example.publication_number}: gold id {gold} outside distribution "
                f"of size {limit}"
            )
    state = initial_state(params, cfg, src)
    total: Tensor | None = None
    nll_sum = 0.0
    penalty_sum = 0.0
    for inp, gold in zip(inputs, targets):
        y_emb = ad.embed_row(params.embedding, inp)
        out = advance(params, cfg, src, state, y_emb)
        term = ad.neg(ad.log(ad.pick(out.dist, gold)))
        nll_sum += term.item()
        if cfg.coverage:
            pen = ad.sum_all(ad.minimum(out.attention, out.coverage_before))
            penalty_sum += pen.item()
            term = ad.add(term, ad.scale(pen, cfg.coverage_weight))
        total = term if total is None else ad.add(total, term)
        state = out.state
    loss = ad.scale(total, 1.0 / T)
    diag = ExampleDiagnostics(
        publication_number=example.publication_number,
        loss=loss.item(),
        nll=nll_sum / T,
        coverage_penalty=penalty_sum / T,
        steps=T,
    )
    return loss, diag


def step_loss(
    batch: Sequence[EncodedExample],
    params: ModelParams,
    cfg: TrainConfig,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, list[ExampleDiagnostics]]:
    """Mean of per-example losses over a batch, on one graph."""
    if not batch:
        raise ConfigError("empty batch")
    total: Tensor | None = None
    diags = []
    for example in batch:
        loss, diag = example_loss(example, params, cfg, rng)
        diags.append(diag)
        total = loss if total is None else ad.add(total, loss)
    return ad.scale(total, 1.0 / len(batch)), diags


# ---------------------------------------------------------------------------
# Evaluation helpers
# ---------------------------------------------------------------------------


def decode_tokens(
    example: EncodedExample, params: ModelParams, cfg: TrainConfig, vocab: Vocabulary,
    mode: str = "greedy", beam_width: int = 4,
):
    result = decode_sequence(example, params, cfg, mode=mode, beam_width=beam_width)
    return decode_extended(result.ids, vocab, example.oov_words), result


def evaluate_split(
    examples: Sequence[EncodedExample],
    references: Sequence[Sequence[str]],
    params: ModelParams,
    cfg: TrainConfig,
    vocab: Vocabulary,
) -> tuple[CorpusRouge, list[list[str]]]:
    decoded = [decode_tokens(ex, params, cfg, vocab)[0] for ex in examples]
    return evaluate_corpus(decoded, list(references)), decoded


def validation_loss(
    examples: Sequence[EncodedExample], params: ModelParams, cfg: TrainConfig
) -> float:
    if not examples:
        return float("nan")
    loss, _ = step_loss(examples, params, cfg, rng=None)
    return loss.item()


def repeated_bigram_rate(tokens: Sequence[str]) -> float:
    """Fraction of bigram occurrences that are repeats of an earlier one."""
    if len(tokens) < 2:
        return 0.0
    grams = [tuple(tokens[i : i + 2]) for i in range(len(tokens) - 1)]
    return 1.0 - len(set(grams)) / len(grams)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    params: ModelParams
    cfg: TrainConfig
    adam: AdamState
    epoch: int


def save_checkpoint(
    path: str | Path, params: ModelParams, cfg: TrainConfig, adam: AdamState, epoch: int
) -> None:
    arrays: dict[str, np.ndarray] = {
        "__format__": np.array(CHECKPOINT_FORMAT),
        "__config__": np.array(json.dumps(cfg.as_dict())),
        "__epoch__": np.array(epoch),
        "__adam__": np.array(
            json.dumps(
                {
                    "learning_rate": adam.learning_rate,
                    "beta1": adam.beta1,
                    "beta2": adam.beta2,
                    "epsilon": adam.epsilon,
                    "step_count": adam.step_count,
                }
            )
        ),
        "__rng__": np.array(json.dumps({"seed": cfg.seed, "epoch": epoch})),
    }
    for key, tensor in params.as_dict().items():
        arrays[f"param.{key}"] = tensor.data
        arrays[f"adam_m.{key}"] = adam.m[key]
        arrays[f"adam_v.{key}"] = adam.v[key]
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def _params_from_arrays(values: dict[str, np.ndarray], cfg: TrainConfig) -> ModelParams:
    def t(key: str) -> Tensor:
        if key not in values:
            raise ConfigError(f"checkpoint missing parameter {key!r}")
        return ad.tensor(values[key], track=True, dtype=values[key].dtype)

    def gru(prefix: str) -> GruCellParams:
        return GruCellParams(t(f"{prefix}.W_u"), t(f"{prefix}.W_r"), t(f"{prefix}.W_h"))

    return ModelParams(
        embedding=t("embedding"),
        master_fwd=gru("master_fwd"),
        master_bwd=gru("master_bwd"),
        W_p=t("W_p"),
        b_p=t("b_p"),
        claims_fwd=gru("claims_fwd"),
        claims_bwd=gru("claims_bwd"),
        W_q=t("W_q"),
        b_q=t("b_q"),
        gate=SlaveGateParams(
            W_1=t("gate.W_1"),
            b_1=t("gate.b_1"),
            W_2=t("gate.W_2"),
            b_2=t("gate.b_2"),
            W_s=t("gate.W_s"),
            W_r=t("gate.W_r"),
            W_k=t("gate.W_k"),
            W_s_untied=t("gate.W_s_untied") if "gate.W_s_untied" in values else None,
        ),
        slave_gru=gru("slave_gru"),
        dec_gru=gru("dec_gru"),
        P_f=t("P_f"),
        P_0=t("P_0"),
        attn=AttentionParams(
            v_a=t("attn.v_a"), W_a=t("attn.W_a"), U_a=t("attn.U_a"), W_c=t("attn.W_c")
        ),
        W_v=t("W_v"),
        b_v=t("b_v"),
        pointer=PointerParams(
            w_c=t("pointer.w_c"),
            w_h=t("pointer.w_h"),
            w_y=t("pointer.w_y"),
            w_d=t("pointer.w_d"),
            b_g=t("pointer.b_g"),
        ),
        W_d=t("W_d"),
        b_d=t("b_d"),
    )


_ARCHITECTURE_FIELDS = (
    "hidden_master", "hidden_slave", "hidden_decoder", "d_c", "embedding",
    "untie_ws", "cd_from_source", "dtype",
)


def load_checkpoint(path: str | Path, expected: TrainConfig | None = None) -> Checkpoint:
    """Rebuild params/optimizer/config; exact round-trip of every array.

    ``expected`` triggers a config-conflict check on architecture fields
    (hidden sizes, content/embedding widths, tying, dtype).
    """
    with np.load(path, allow_pickle=False) as data:
        values = {k: data[k] for k in data.files}
    fmt = str(values.get("__format__", ""))
    if fmt != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: unsupported checkpoint format {fmt!r}")
    cfg = TrainConfig.from_dict(json.loads(str(values["__config__"])))
    if expected is not None:
        conflicts = [
            f"{name}: checkpoint={getattr(cfg, name)} requested={getattr(expected, name)}"
            for name in _ARCHITECTURE_FIELDS
            if getattr(cfg, name) != getattr(expected, name)
        ]
        if conflicts:
            raise ConfigError(f"{path}: config conflict: " + "; ".join(conflicts))
    params = _params_from_arrays(
        {k[len("param."):]: v for k, v in values.items() if k.startswith("param.")}, cfg
    )
    meta = json.loads(str(values["__adam__"]))
    adam = AdamState(
        params.as_dict(),
        learning_rate=meta["learning_rate"],
        beta1=meta["beta1"],
        beta2=meta["beta2"],
        epsilon=meta["epsilon"],
    )
    adam.step_count = int(meta["step_count"])
    for key in adam.m:
        adam.m[key] = values[f"adam_m.{key}"].copy()
        adam.v[key] = values[f"adam_v.{key}"].copy()
    return Checkpoint(params=params, cfg=cfg, adam=adam, epoch=int(values["__epoch__"]))


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_loss: float
    rouge_1: float
    rouge_2: float
    rouge_l: float

    def as_row(self) -> str:
        return (
            f"{self.epoch}\t{self.train_loss:.6f}\t{self.val_loss:.6f}"
            f"\t{self.rouge_1:.6f}\t{self.rouge_2:.6f}\t{self.rouge_l:.6f}"
        )


METRIC_HEADER = "epoch\ttrain_loss\tval_loss\trouge_1\trouge_2\trouge_l"


@dataclass
class TrainResult:
    params: ModelParams
    adam: AdamState
    history: list[EpochMetrics]
    best_epoch: int
    stopped_early: bool
    last_checkpoint: Path | None = None
    best_checkpoint: Path | None = None
    best_params: ModelParams | None = None


def _epoch_rng(seed: int, purpose: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, purpose, epoch])


def train(
    data: TrainData,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    params: ModelParams | None = None,
    adam: AdamState | None = None,
    start_epoch: int = 0,
    target_train_loss: float | None = None,
    quiet: bool = True,
    track_best: bool = False,
) -> TrainResult:
    """Run the training loop; emits a checkpoint per epoch when ``out_dir`` is set.

    ``checkpoint_last.npz`` is rewritten every epoch, ``checkpoint_best.npz``
    tracks the best validation ROUGE-L (``track_best=True`` additionally
    keeps an in-memory copy of those parameters). Early stopping waits
    ``cfg.early_stop_patience`` epochs (0 disables it); ``target_train_loss``
    stops as soon as the epoch's training loss falls below it.
    """
    cfg.validate()
    if not data.train:
        raise ConfigError("empty training split")
    if params is None:
        params = init_model_params(cfg, len(data.vocab))
    if adam is None:
        adam = AdamState(params.as_dict(), learning_rate=cfg.learning_rate)
    param_dict = params.as_dict()

    out_path = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        metrics_path = out_path / "metrics.tsv"
        new_file = start_epoch == 0 or not metrics_path.exists()
        metrics_fh = open(metrics_path, "w" if new_file else "a", encoding="utf-8")
        if new_file:
            metrics_fh.write(METRIC_HEADER + "\n")

    history: list[EpochMetrics] = []
    best_rouge_l = -1.0
    best_epoch = start_epoch
    since_best = 0
    stopped_early = False
    last_ckpt = best_ckpt = None
    best_params: ModelParams | None = None
    try:
        for epoch in range(start_epoch + 1, cfg.epochs + 1):
            shuffle_rng = _epoch_rng(cfg.seed, 1, epoch)
            dropout_rng = _epoch_rng(cfg.seed, 2, epoch)
            order = np.arange(len(data.train))
            shuffle_rng.shuffle(order)
            total_loss = 0.0
            for lo in range(0, len(order), cfg.batch_size):
                batch = [data.train[i] for i in order[lo : lo + cfg.batch_size]]
                with Tape() as tape:
                    loss, _ = step_loss(batch, params, cfg, rng=dropout_rng)
                    if not np.isfinite(loss.item()):
                        raise DivergenceError(
                            f"non-finite loss at epoch {epoch}; "
                            f"last good checkpoint: {last_ckpt}"
                        )
                    tape.backward(loss)
                grads = {k: p.grad for k, p in param_dict.items() if p.grad is not None}
                ad.clip_gradients(grads, cfg.grad_clip)
                ad.adam_step(param_dict, grads, adam)
                total_loss += loss.item() * len(batch)
            train_loss = total_loss / len(order)

            val_loss = validation_loss(data.validation, params, cfg)
            if data.validation:
                scores, _ = evaluate_split(
                    data.validation, data.val_references, params, cfg, data.vocab
                )
            else:
                scores = CorpusRouge(0.0, 0.0, 0.0)
            row = EpochMetrics(epoch, train_loss, val_loss,
                               scores.rouge_1, scores.rouge_2, scores.rouge_l)
            history.append(row)
            if metrics_fh is not None:
                metrics_fh.write(row.as_row() + "\n")
                metrics_fh.flush()
            if not quiet:
                print(row.as_row())

            if out_path is not None:
                last_ckpt = out_path / "checkpoint_last.npz"
                save_checkpoint(last_ckpt, params, cfg, adam, epoch)
            if scores.rouge_l > best_rouge_l:
                best_rouge_l = scores.rouge_l
                best_epoch = epoch
                since_best = 0
                if track_best:
                    best_params = _params_from_arrays(
                        {k: t.data.copy() for k, t in param_dict.items()}, cfg
                    )
                if out_path is not None:
                    best_ckpt = out_path / "checkpoint_best.npz"
                    save_checkpoint(best_ckpt, params, cfg, adam, epoch)
            else:
                since_best += 1

            if target_train_loss is not None and train_loss < target_train_loss:
                break
            if cfg.early_stop_patience and since_best >= cfg.early_stop_patience:
                stopped_early = True
                break
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    return TrainResult(
        params=params,
        adam=adam,
        history=history,
        best_epoch=best_epoch,
        stopped_early=stopped_early,
        last_checkpoint=last_ckpt,
        best_checkpoint=best_ckpt,
        best_params=best_params,
    )


# ---------------------------------------------------------------------------
# Ablations and sweeps
# ---------------------------------------------------------------------------

VARIANT_FLAGS = {
    "full": {},
    "-coverage": {"coverage": False},
    "-slave": {"slave": False},
    "-pointer": {"pointer": False},
    "spec-only": {"use_claims": False, "use_spec": True},
    "claims-only": {"use_claims": True, "use_spec": False},
}


def apply_variant(cfg: TrainConfig, variant: str) -> TrainConfig:
    """Translate a variant label like ``-coverage+-pointer`` into a config."""
    overrides: dict = {}
    for part in variant.split("+"):
        part = part.strip()
        if part not in VARIANT_FLAGS:
            raise ConfigError(
                f"unknown ablation variant {part!r}; known: {sorted(VARIANT_FLAGS)}"
            )
        overrides.update(VARIANT_FLAGS[part])
    return replace(cfg, **overrides)


@dataclass
class AblationRow:
    variant: str
    rouge_1: float
    rouge_2: float
    rouge_l: float
    train_loss: float
    repeated_bigrams: float


def run_ablation(
    train_records: Sequence[PatentRecord],
    val_records: Sequence[PatentRecord],
    vocab: Vocabulary,
    cfg: TrainConfig,
    variants: Sequence[str],
    out_dir: str | Path | None = None,
) -> list[AblationRow]:
    """Train and score each variant with the shared seed and data."""
    rows = []
    for variant in variants:
        vcfg = apply_variant(cfg, variant)
        data = prepare_data(train_records, val_records, vocab, vcfg)
        run_dir = Path(out_dir) / variant.replace("+", "_") if out_dir else None
        result = train(data, vcfg, out_dir=run_dir)
        scores, decoded = evaluate_split(
            data.validation, data.val_references, result.params, vcfg, data.vocab
        )
        rate = (
            float(np.mean([repeated_bigram_rate(toks) for toks in decoded]))
            if decoded
            else 0.0
        )
        rows.append(
            AblationRow(
                variant=variant,
                rouge_1=scores.rouge_1,
                rouge_2=scores.rouge_2,
                rouge_l=scores.rouge_l,
                train_loss=result.history[-1].train_loss if result.history else float("nan"),
                repeated_bigrams=rate,
            )
        )
    return rows


def format_ablation_table(rows: Sequence[AblationRow]) -> str:
    lines = ["variant\trouge_1\trouge_2\trouge_l"]
    for r in rows:
        lines.append(f"{r.variant}\t{r.rouge_1:.4f}\t{r.rouge_2:.4f}\t{r.rouge_l:.4f}")
    return "\n".join(lines)
