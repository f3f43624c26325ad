"""Adam training loops and the two-stage domain-transfer (forgetting) protocol.

Training is teacher-forced next-token prediction with the loss restricted to
answer tokens (question and separator positions carry zero weight). Stage 1 of
the protocol trains the backbone on the first domain with adapters frozen at
their neutral init; stage 2 branches into (a) full fine-tuning on the second
domain and (b) adapter-only tuning with the backbone frozen. Both branches are
scored on both validation sets, which is where the retention gap shows up.

Everything is a pure function of (inputs, seed): sample order, corpus content
and initialization all come from named substreams of one seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import GradTape, Param, rng_stream
from .corpus import SEP_ID, STOP_ID, Sample, Vocab, standard_corpora, total_scenes
from .evaluation import ScoredSample, answer_uncertainty, meteor_exact, rouge_l
from .model import MODE_EVAL, MODE_FROZEN, MODE_FULL, DecoderConfig, TinyDecoder, build_model, generate_greedy


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class AdamState:
    """Bias-corrected Adam over a fixed parameter list; moments keyed by name."""

    def __init__(self, params: list[Param], config: AdamConfig = AdamConfig()):
        self.params = list(params)
        self.config = config
        self.step = 0
        self.m = {p.name: np.zeros(p.shape) for p in self.params}
        self.v = {p.name: np.zeros(p.shape) for p in self.params}


def adam_step(state: AdamState, grads: dict[str, np.ndarray]) -> None:
    """One update over the state's parameters; untracked parameters untouched."""
    c = state.config
    state.step += 1
    t = state.step
    for p in state.params:
        g = grads.get(p.name)
        if g is None:
            raise ValueError(f"missing gradient for parameter {p.name!r}")
        m = state.m[p.name]
        v = state.v[p.name]
        m[:] = c.beta1 * m + (1 - c.beta1) * g
        v[:] = c.beta2 * v + (1 - c.beta2) * (g * g)
        m_hat = m / (1 - c.beta1 ** t)
        v_hat = v / (1 - c.beta2 ** t)
        p.value -= c.lr * m_hat / (np.sqrt(v_hat) + c.eps)


# ---- teacher forcing ---------------------------------------------------------


def teacher_arrays(q_ids: list[int], a_ids: list[int], prefixed: bool = True):
    """(inputs, targets, weights) for one QA pair.

    The full sequence is question + <sep> + answer + <stop>. With a scene
    prefix the model emits one extra leading row, so every sequence id becomes
    a target; without it the usual shift-by-one applies. Weights select the
    answer tokens (including <stop>) only.
    """
    ids = list(q_ids) + [SEP_ID] + list(a_ids) + [STOP_ID]
    first_answer = len(q_ids) + 1
    if prefixed:
        inputs, targets = ids[:-1], ids
        weights = [1.0 if t >= first_answer else 0.0 for t in range(len(targets))]
    else:
        inputs, targets = ids[:-1], ids[1:]
        weights = [1.0 if t + 1 >= first_answer else 0.0 for t in range(len(targets))]
    return inputs, targets, weights


def sample_loss(tape: GradTape, model: TinyDecoder, sample: Sample, vocab: Vocab, mode: str):
    """Answer-token cross-entropy node for one sample."""
    q_ids = vocab.encode(sample.question)
    a_ids = vocab.encode(sample.answer)
    inputs, targets, weights = teacher_arrays(q_ids, a_ids, prefixed=True)
    logits = model.forward(tape, inputs, scene_id=sample.scene_id, mode=mode)
    return tape.cross_entropy(logits, targets, weights=weights)


def train(model: TinyDecoder, samples, vocab: Vocab, mode: str, epochs: int, seed: int,
          adam: AdamConfig = AdamConfig(), batch_size: int = 8, stream: str = "train",
          on_epoch=None) -> list[float]:
    """Minimize answer cross-entropy; returns the per-epoch mean sample loss.

    Gradients are averaged over each shuffled batch (one tape per sample).
    Zero epochs leave the model untouched and return an empty curve.
    ``on_epoch(index, mean_loss)`` runs after each epoch with the model in its
    current state (for validation tracking or snapshotting); it must treat the
    model as read-only.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("cannot train on an empty corpus")
    if mode not in (MODE_FROZEN, MODE_FULL):
        raise ValueError(f"training mode must be frozen-backbone or full, got {mode!r}")
    trainable = model.trainable_params(mode)
    state = AdamState(trainable, adam)
    curve = []
    for epoch in range(epochs):
        order = rng_stream(seed, f"{stream}/epoch{epoch}").permutation(len(samples))
        losses = []
        for lo in range(0, len(order), batch_size):
            batch = [samples[int(i)] for i in order[lo:lo + batch_size]]
            sums = {p.name: np.zeros(p.shape) for p in trainable}
            for s in batch:
                tape = GradTape()
                loss = sample_loss(tape, model, s, vocab, mode)
                tape.backward(loss)
                losses.append(float(loss.value[0, 0]))
                for p in trainable:
                    sums[p.name] += tape.grad(p)
            adam_step(state, {k: g / len(batch) for k, g in sums.items()})
        curve.append(float(np.mean(losses)))
        if on_epoch is not None:
            on_epoch(epoch, curve[-1])
    return curve


# ---- evaluation over a model ----------------------------------------------------


def token_accuracy(model: TinyDecoder, sample: Sample, vocab: Vocab) -> float:
    """Teacher-forced fraction of answer positions predicted correctly."""
    q_ids = vocab.encode(sample.question)
    a_ids = vocab.encode(sample.answer)
    inputs, targets, weights = teacher_arrays(q_ids, a_ids, prefixed=True)
    logits = model.forward(GradTape(), inputs, scene_id=sample.scene_id, mode=MODE_EVAL)
    preds = np.argmax(logits.value, axis=1)
    mask = np.asarray(weights) > 0
    return float(np.mean(preds[mask] == np.asarray(targets)[mask]))


def evaluate_model(model: TinyDecoder, samples, vocab: Vocab, max_new: int = 12) -> list[ScoredSample]:
    """Greedy-generate every sample's answer and score it."""
    scored = []
    for i, s in enumerate(samples):
        prompt = vocab.encode(s.question) + [SEP_ID]
        trace = generate_greedy(model, prompt, max_new=max_new, stop_id=STOP_ID,
                                scene_id=s.scene_id, vocab=vocab)
        scored.append(ScoredSample(
            sample_id=i,
            reference=s.answer,
            generated=trace.text,
            uncertainty=answer_uncertainty(trace),
            rouge_l=rouge_l(trace.text, s.answer),
            token_accuracy=token_accuracy(model, s, vocab),
        ))
    return scored


def bleu4_validation(model: TinyDecoder, samples, vocab: Vocab, max_new: int = 12) -> float:
    """Mean per-sample BLEU-4 of greedy generations against the references."""
    from .evaluation import bleu

    scores = []
    for s in samples:
        prompt = vocab.encode(s.question) + [SEP_ID]
        trace = generate_greedy(model, prompt, max_new=max_new, stop_id=STOP_ID,
                                scene_id=s.scene_id, vocab=vocab)
        scores.append(bleu(trace.text, s.answer, 4))
    return float(np.mean(scores))


def _domain_means(scored: list[ScoredSample]) -> tuple[float, float, float]:
    r = float(np.mean([s.rouge_l for s in scored]))
    m = float(np.mean([meteor_exact(s.generated, s.reference) for s in scored]))
    a = float(np.mean([s.token_accuracy for s in scored]))
    return r, m, a


# ---- the two-stage protocol -------------------------------------------------------


@dataclass(frozen=True)
class RetentionReport:
    """One stage-2 strategy scored on both domains (fractions in [0, 1])."""

    strategy: str  # "fft" | "adapter"
    seed: int
    train_rouge_l: float
    train_meteor: float
    train_token_acc: float
    pre_rouge_l: float
    pre_meteor: float
    pre_token_acc: float

    def __post_init__(self):
        if self.strategy not in ("fft", "adapter"):
            raise ValueError(f"strategy must be fft or adapter, got {self.strategy!r}")
        for f in ("train_rouge_l", "train_meteor", "train_token_acc",
                  "pre_rouge_l", "pre_meteor", "pre_token_acc"):
            v = getattr(self, f)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{f} = {v} outside [0, 1]")


def forgetting_experiment(config: DecoderConfig, r_l, r_m, seeds,
                          n_train: int, n_val: int,
                          stage1_epochs: int, stage2_epochs: int,
                          adam: AdamConfig = AdamConfig(), batch_size: int = 8,
                          max_new: int = 12,
                          ) -> list[tuple[RetentionReport, RetentionReport]]:
    """Stage 1 on the first domain, stage 2 per strategy on the second.

    Returns one (fft, adapter) report pair per seed. The pretrained-domain
    columns measure what stage 2 destroyed; the training-domain columns check
    that the adapter branch still learned the new domain.
    """
    if not seeds:
        raise ValueError("need at least one seed")
    if config.scenes < total_scenes():
        raise ValueError(
            f"model config provides {config.scenes} scene prefixes, "
            f"the standard domains need {total_scenes()}"
        )
    out = []
    for seed in seeds:
        seed = int(seed)
        domain_a, domain_b, vocab = standard_corpora(n_train, n_val, seed, config.vocab)
        model = build_model(config, r_l, r_m, seed=seed)
        train(model, domain_a.train, vocab, MODE_FULL, stage1_epochs, seed,
              adam=adam, batch_size=batch_size, stream="stage1")

        fft = model.copy()
        train(fft, domain_b.train, vocab, MODE_FULL, stage2_epochs, seed,
              adam=adam, batch_size=batch_size, stream="stage2-fft")
        adapter = model.copy()
        train(adapter, domain_b.train, vocab, MODE_FROZEN, stage2_epochs, seed,
              adam=adam, batch_size=batch_size, stream="stage2-adapter")

        reports = []
        for name, branch in (("fft", fft), ("adapter", adapter)):
            tr, tm, ta = _domain_means(evaluate_model(branch, domain_b.val, vocab, max_new))
            pr, pm, pa = _domain_means(evaluate_model(branch, domain_a.val, vocab, max_new))
            reports.append(RetentionReport(
                strategy=name, seed=seed,
                train_rouge_l=tr, train_meteor=tm, train_token_acc=ta,
                pre_rouge_l=pr, pre_meteor=pm, pre_token_acc=pa,
            ))
        out.append((reports[0], reports[1]))
    return out
