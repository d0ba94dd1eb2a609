"""Caption model: embeddings, recurrent cell, softmax decoder, training, checkpoints.

The projected image feature is the first input of every sequence and
predicts the first word; each word's embedding then predicts the next
word, and the last word predicts END.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from glstm import container
from glstm.cells import (
    CellState,
    GlstmParams,
    LstmParams,
    StepCache,
    init_glstm,
    init_lstm,
    sequence_backward,
    sequence_forward,
    step,
)
from glstm.errors import (
    BadInputError,
    ChecksumError,
    ConfigError,
    DivergenceError,
    ShapeError,
    StaleCacheError,
)
from glstm.numkit import log_softmax, softmax
from glstm.textcorpus import Corpus, CorpusItem, Vocabulary

CHECKPOINT_MAGIC = b"GLSC"


@dataclass(eq=False)
class CaptionModel:
    W_img: np.ndarray  # embed x F
    W_emb: np.ndarray  # embed x K
    cell: LstmParams
    W_dec: np.ndarray  # K x hidden
    b_dec: np.ndarray  # K
    vocab: Vocabulary
    guidance_kind: str | None = None
    meta: dict = field(default_factory=dict)
    updates: int = 0

    def __post_init__(self):
        embed, _ = self.W_img.shape
        k = len(self.vocab)
        if self.W_emb.shape != (embed, k):
            raise ShapeError(f"W_emb has shape {self.W_emb.shape}, expected {(embed, k)}")
        if self.cell.input_dim != embed:
            raise ShapeError(f"cell input dim {self.cell.input_dim} != embedding dim {embed}")
        if self.W_dec.shape != (k, self.cell.hidden_dim):
            raise ShapeError(f"W_dec has shape {self.W_dec.shape}, expected {(k, self.cell.hidden_dim)}")
        if self.b_dec.shape != (k,):
            raise ShapeError(f"b_dec has shape {self.b_dec.shape}, expected {(k,)}")
        if (self.guidance_kind is not None) != self.is_guided:
            raise ShapeError("guidance kind must be set exactly when the cell is guided")

    @property
    def is_guided(self) -> bool:
        return isinstance(self.cell, GlstmParams)

    @property
    def dims(self) -> dict:
        return {
            "feature": self.W_img.shape[1],
            "vocab": len(self.vocab),
            "embed": self.W_img.shape[0],
            "hidden": self.cell.hidden_dim,
            "guidance": self.cell.guidance_dim,
        }

    def parameters(self) -> dict[str, np.ndarray]:
        """All trainable arrays by name, in checkpoint order. Values are live views."""
        params = {"W_img": self.W_img, "W_emb": self.W_emb}
        params.update({f"cell.{k}": v for k, v in self.cell.named().items()})
        params["W_dec"] = self.W_dec
        params["b_dec"] = self.b_dec
        return params

    def copy(self) -> "CaptionModel":
        return CaptionModel(
            self.W_img.copy(),
            self.W_emb.copy(),
            self.cell.copy(),
            self.W_dec.copy(),
            self.b_dec.copy(),
            self.vocab,
            self.guidance_kind,
            copy.deepcopy(self.meta),
            self.updates,
        )


def init_model(
    vocab: Vocabulary,
    feature_dim: int,
    embed: int = 256,
    hidden: int = 256,
    guidance_dim: int | None = None,
    guidance_kind: str | None = None,
    seed: int = 0,
    biases: bool = True,
    zero_guidance: bool = False,
) -> CaptionModel:
    """Fresh model. A guided cell is built when ``guidance_dim`` is given.

    All shared weights are drawn before the guidance matrices, so an LSTM and a
    gLSTM built from the same seed agree everywhere except ``W_.q``.
    """
    rng = np.random.default_rng(seed)
    k = len(vocab)
    W_img = rng.uniform(-1, 1, (embed, feature_dim)) / math.sqrt(feature_dim)
    W_emb = rng.uniform(-1, 1, (embed, k)) / math.sqrt(embed)
    W_dec = rng.uniform(-1, 1, (k, hidden)) / math.sqrt(hidden)
    b_dec = np.zeros(k)
    if guidance_dim is None:
        cell = init_lstm(embed, hidden, rng, biases)
    else:
        cell = init_glstm(embed, hidden, guidance_dim, rng, biases, zero_guidance)
        guidance_kind = guidance_kind or "img"
    return CaptionModel(W_img, W_emb, cell, W_dec, b_dec, vocab, guidance_kind if guidance_dim else None)


# --- forward / backward -------------------------------------------------------


@dataclass
class LossReport:
    nll: float
    tokens: int
    per_step: list[float] = field(default_factory=list)

    @property
    def perplexity(self) -> float:
        return math.exp(self.nll / self.tokens) if self.tokens else 1.0


@dataclass
class ForwardCache:
    model_id: int
    updates: int
    feature: np.ndarray
    caption: list[int]
    guidance: np.ndarray | None
    cell_cache: list[StepCache]
    in_masks: list[np.ndarray | None]
    out_masks: list[np.ndarray | None]
    hidden_out: list[np.ndarray]
    probs: list[np.ndarray]


def assemble_sequence(model: CaptionModel, feature, caption: Sequence[int]) -> tuple[list[np.ndarray], list[int]]:
    """Inputs ``[W_img f, W_emb[:, w_1], ..., W_emb[:, w_{L-1}]]`` and targets ``caption``."""
    caption = list(caption)
    if not caption or caption[-1] != model.vocab.end:
        raise BadInputError("caption must end with the END index")
    if model.vocab.end in caption[:-1]:
        raise BadInputError("END may only appear once, at the end of the caption")
    feature = np.asarray(feature, dtype=np.float64)
    if feature.shape != (model.W_img.shape[1],):
        raise ShapeError(f"feature has shape {feature.shape}, model expects {(model.W_img.shape[1],)}")
    inputs = [model.W_img @ feature] + [model.W_emb[:, w].copy() for w in caption[:-1]]
    return inputs, caption


def _dropout_mask(rng, rate: float, size: int) -> np.ndarray | None:
    if rate <= 0.0:
        return None
    return (rng.random(size) >= rate) / (1.0 - rate)


def forward_loss(
    model: CaptionModel,
    feature,
    caption: Sequence[int],
    guidance=None,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
) -> tuple[LossReport, ForwardCache]:
    """Summed negative log-likelihood of ``caption`` given the image.

    Inverted dropout at rate ``dropout`` hits every cell input and every
    hidden output feeding the decoder; it needs ``rng`` when positive.
    """
    inputs, targets = assemble_sequence(model, feature, caption)
    if model.is_guided:
        if guidance is None:
            raise ShapeError("guided model needs a guidance vector")
        guidance = np.asarray(guidance, dtype=np.float64)
    elif guidance is not None:
        raise ShapeError("plain LSTM model does not take guidance")
    if dropout > 0.0 and rng is None:
        raise ConfigError("dropout needs a random generator")

    in_masks = [_dropout_mask(rng, dropout, x.size) for x in inputs]
    dropped = [x if mk is None else x * mk for x, mk in zip(inputs, in_masks)]
    outputs, cell_cache = sequence_forward(model.cell, dropped, guidance)

    nll = 0.0
    per_step, probs, hidden_out, out_masks = [], [], [], []
    for m, target in zip(outputs, targets):
        mk = _dropout_mask(rng, dropout, m.size)
        h = m if mk is None else m * mk
        logp = log_softmax(model.W_dec @ h + model.b_dec)
        ce = -float(logp[target])
        nll += ce
        per_step.append(ce)
        probs.append(np.exp(logp))
        hidden_out.append(h)
        out_masks.append(mk)
    report = LossReport(nll, len(targets), per_step)
    cache = ForwardCache(
        id(model), model.updates, np.asarray(feature, dtype=np.float64), targets, guidance,
        cell_cache, in_masks, out_masks, hidden_out, probs,
    )
    return report, cache


def backward(model: CaptionModel, cache: ForwardCache) -> tuple[dict[str, np.ndarray], np.ndarray | None]:
    """Gradients of the summed NLL for every entry of ``model.parameters()``,
    plus the gradient with respect to the guidance vector (None for LSTM)."""
    if cache.model_id != id(model) or cache.updates != model.updates:
        raise StaleCacheError("forward cache does not belong to the current model parameters")
    grads = {k: np.zeros_like(v) for k, v in model.parameters().items()}
    grad_m = []
    for t, (p, h, target) in enumerate(zip(cache.probs, cache.hidden_out, cache.caption)):
        dlogits = p.copy()
        dlogits[target] -= 1.0
        grads["W_dec"] += np.outer(dlogits, h)
        grads["b_dec"] += dlogits
        dm = model.W_dec.T @ dlogits
        mk = cache.out_masks[t]
        grad_m.append(dm if mk is None else dm * mk)

    seq = sequence_backward(model.cell, cache.cell_cache, grad_m)
    for k, v in seq.params.named().items():
        grads[f"cell.{k}"] = v
    for t, dx in enumerate(seq.inputs):
        mk = cache.in_masks[t]
        if mk is not None:
            dx = dx * mk
        if t == 0:
            grads["W_img"] += np.outer(dx, cache.feature)
        else:
            grads["W_emb"][:, cache.caption[t - 1]] += dx
    return grads, seq.guidance


def start(model: CaptionModel, feature, guidance=None) -> tuple[CellState, np.ndarray]:
    """Feed the image; return the state and log-probabilities of the first word."""
    feature = np.asarray(feature, dtype=np.float64)
    state, _ = step(model.cell, model.W_img @ feature, guidance, CellState.zeros(model.cell.hidden_dim))
    return state, log_softmax(model.W_dec @ state.m + model.b_dec)


def advance(model: CaptionModel, state: CellState, word: int, guidance=None) -> tuple[CellState, np.ndarray]:
    state, _ = step(model.cell, model.W_emb[:, word], guidance, state)
    return state, log_softmax(model.W_dec @ state.m + model.b_dec)


def next_word_distribution(model: CaptionModel, state: CellState) -> np.ndarray:
    return softmax(model.W_dec @ state.m + model.b_dec)


# --- training ------------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 1e-4
    decay: float = 0.99
    eps: float = 1e-8
    clip: float = 5.0
    dropout: float = 0.5
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0 or self.eps <= 0 or self.clip <= 0:
            raise ConfigError("lr must be >= 0; eps and clip must be positive")
        if not 0.0 < self.decay < 1.0:
            raise ConfigError("RMSProp decay must lie in (0, 1)")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.max_epochs < 1 or self.patience < 0:
            raise ConfigError("max_epochs must be >= 1 and patience >= 0")


GuidanceProvider = Callable[[CorpusItem], "np.ndarray | None"]


@dataclass
class Example:
    item: CorpusItem
    caption: list[int]
    guidance: np.ndarray | None


def make_examples(model: CaptionModel, corpus: Corpus, guidance_provider: GuidanceProvider | None = None) -> list[Example]:
    out = []
    for item in corpus.items:
        g = guidance_provider(item) if guidance_provider is not None else None
        for tokens in item.captions:
            out.append(Example(item, model.vocab.encode(tokens), g))
    return out


def evaluate(model: CaptionModel, examples: Sequence[Example]) -> LossReport:
    """Dropout-free summed NLL over ``examples`` (fixed order)."""
    nll, tokens = 0.0, 0
    for ex in examples:
        rep, _ = forward_loss(model, ex.item.feature, ex.caption, ex.guidance)
        nll += rep.nll
        tokens += rep.tokens
    return LossReport(nll, tokens)


class RMSProp:
    """``r <- decay*r + (1-decay)*g^2``; ``w <- w - lr*g/(sqrt(r)+eps)``, after clipping g."""

    def __init__(self, config: TrainConfig, state: dict[str, np.ndarray] | None = None):
        self.config = config
        self.state = state if state is not None else {}

    def update(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        cfg = self.config
        for name, w in params.items():
            g = np.clip(grads[name], -cfg.clip, cfg.clip)
            r = self.state.get(name)
            if r is None:
                r = self.state[name] = np.zeros_like(w)
            r *= cfg.decay
            r += (1.0 - cfg.decay) * g * g
            w -= cfg.lr * g / (np.sqrt(r) + cfg.eps)


@dataclass
class TrainResult:
    model: CaptionModel
    log: list[dict]
    best_epoch: int
    last_epoch: int
    optimizer_state: dict[str, np.ndarray]


def train(
    model: CaptionModel,
    train_corpus: Corpus,
    val_corpus: Corpus,
    guidance_provider: GuidanceProvider | None,
    config: TrainConfig,
    start_epoch: int = 0,
    optimizer_state: dict[str, np.ndarray] | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Per-caption RMSProp with dropout and early stopping on validation NLL.

    The returned model is the best-validation snapshot (possibly the
    untouched input). Shuffling and dropout draw from a generator seeded by
    ``(seed, epoch)``, so a run resumed from a snapshot at epoch k repeats
    epoch k+1 of the uninterrupted run exactly.
    """
    if len(train_corpus) == 0 or len(val_corpus) == 0:
        raise BadInputError("training needs non-empty train and validation splits")
    if model.is_guided and guidance_provider is None:
        raise ConfigError("guided model needs a guidance provider")
    train_ex = make_examples(model, train_corpus, guidance_provider if model.is_guided else None)
    val_ex = make_examples(model, val_corpus, guidance_provider if model.is_guided else None)

    model = model.copy()
    opt = RMSProp(config, {k: v.copy() for k, v in (optimizer_state or {}).items()})
    best_val = evaluate(model, val_ex)
    if not math.isfinite(best_val.nll):
        raise DivergenceError(start_epoch, "initial validation loss is not finite")
    best = (model.copy(), start_epoch, {k: v.copy() for k, v in opt.state.items()})
    log: list[dict] = []
    stale = 0
    epoch = start_epoch
    while epoch < config.max_epochs:
        epoch += 1
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(len(train_ex))
        nll, tokens = 0.0, 0
        params = model.parameters()
        for idx in order:
            ex = train_ex[idx]
            rep, cache = forward_loss(model, ex.item.feature, ex.caption, ex.guidance, config.dropout, rng)
            if not math.isfinite(rep.nll):
                raise DivergenceError(epoch)
            grads, _ = backward(model, cache)
            opt.update(params, grads)
            model.updates += 1
            nll += rep.nll
            tokens += rep.tokens
        val = evaluate(model, val_ex)
        if not math.isfinite(val.nll) or not all(np.all(np.isfinite(v)) for v in params.values()):
            raise DivergenceError(epoch)
        improved = val.nll < best_val.nll
        if improved:
            best_val = val
            best = (model.copy(), epoch, {k: v.copy() for k, v in opt.state.items()})
            stale = 0
        else:
            stale += 1
        entry = {
            "epoch": epoch,
            "train_nll": nll,
            "train_ppl": math.exp(nll / tokens),
            "val_nll": val.nll,
            "val_ppl": val.perplexity,
            "improved": improved,
        }
        log.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
        if stale >= config.patience:
            break

    best_model, best_epoch, best_opt = best
    best_model.meta = dict(best_model.meta, epoch=best_epoch, config=asdict(config))
    return TrainResult(best_model, log, best_epoch, epoch, best_opt)


# --- checkpoints ------------------------------------------------------------------


def _header(model: CaptionModel) -> dict:
    return {
        "kind": "caption_model",
        "cell": "glstm" if model.is_guided else "lstm",
        "guidance_kind": model.guidance_kind,
        "biases": model.cell.has_biases,
        "dims": model.dims,
        "vocab": model.vocab.words,
        "vocab_checksum": model.vocab.checksum(),
        "meta": model.meta,
    }


def save_checkpoint(model: CaptionModel, path, optimizer_state: dict[str, np.ndarray] | None = None) -> None:
    tensors = dict(model.parameters())
    if optimizer_state:
        for name in model.parameters():
            tensors[f"opt.{name}"] = optimizer_state[name]
    container.write(path, CHECKPOINT_MAGIC, _header(model), tensors)


def load_checkpoint(path, vocab: Vocabulary | None = None, with_optimizer: bool = False):
    """Load a model (and optionally the RMSProp accumulators saved with it).

    Raises VersionError on a foreign magic or version, ChecksumError when the
    stored vocabulary (or ``vocab``) disagrees with the recorded checksum, and
    TruncatedFileError on a short file.
    """
    header, tensors = container.read(path, CHECKPOINT_MAGIC)
    if header.get("kind") != "caption_model":
        raise BadInputError(f"{path} is not a caption model checkpoint")
    stored_vocab = Vocabulary(header["vocab"])
    if stored_vocab.checksum() != header["vocab_checksum"]:
        raise ChecksumError("vocabulary does not match its recorded checksum")
    if vocab is not None and vocab.checksum() != header["vocab_checksum"]:
        raise ChecksumError("checkpoint was trained with a different vocabulary")
    cell_fields = {k[5:]: v for k, v in tensors.items() if k.startswith("cell.")}
    cell = GlstmParams(**cell_fields) if header["cell"] == "glstm" else LstmParams(**cell_fields)
    model = CaptionModel(
        tensors["W_img"], tensors["W_emb"], cell, tensors["W_dec"], tensors["b_dec"],
        stored_vocab, header["guidance_kind"], header.get("meta", {}),
    )
    if with_optimizer:
        opt = {k[4:]: v for k, v in tensors.items() if k.startswith("opt.")}
        return model, opt
    return model
