"""Few-shot anomaly detection: mutual-information representation + scoring.

Stage one learns an embedding of normal frames only, by maximising a
Donsker-Varadhan lower bound on mutual information between images and
their embeddings (globally and over local feature positions) while an
adversarial prior discriminator pulls the embedding distribution toward a
standard normal. Stage two freezes that representation and trains a small
score-inference MLP on normal plus a handful of abnormal frames, pulling
normal scores to the score prior and pushing abnormal scores past a margin.

Three interchangeable feature sources exist so the ablations share one
scoring path: the learned encoder, a convolutional autoencoder's encoder,
and frame mean-pool features (no representation learning at all).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ndgrad as nd
from . import nets
from .ndgrad import Tape, Tensor
from .nets import NetworkParams
from .synthdata import ABNORMAL, NORMAL, SynthFrame

__all__ = [
    "RepresentationModel", "AutoencoderModel", "RawPixelEmbedder", "SinModel",
    "dv_mi_lower_bound", "prior_adversarial_losses", "train_representation",
    "measure_global_mi", "sin_loss", "train_sin", "anomaly_score",
    "anomaly_scores", "classify", "ae_baseline",
]

EPS = 1e-12

# Encoder layout: four stride-2 convs (64/128/256/512 filters of size 4x4)
# followed by a linear map to the embedding. Local MI pairs the embedding
# with the third conv's activation map; global MI uses the fourth's.
_LOCAL_TAP = 5    # relu after the 256-filter conv -> (6, 6, 256)
_GLOBAL_TAP = 7   # relu after the 512-filter conv -> (2, 2, 512)


def _encoder_specs(z_dim: int):
    return (nets.conv(64, 4, stride=2), nets.relu(),
            nets.conv(128, 4, stride=2), nets.relu(),
            nets.conv(256, 4, stride=2), nets.relu(),
            nets.conv(512, 4, stride=2), nets.relu(),
            nets.linear(z_dim))


def _global_disc_specs():
    # Three 3x3 convs (128/64/32 filters) over the deepest feature map
    # concatenated with the spatially broadcast embedding, then a scalar
    # readout.
    return (nets.conv(128, 3, padding=1), nets.relu(),
            nets.conv(64, 3, padding=1), nets.relu(),
            nets.conv(32, 3, padding=1), nets.relu(),
            nets.linear(1))


def _local_disc_specs():
    # Three 1x1 convs (192/512/512 filters) applied position-wise to the
    # local feature map concatenated with the broadcast embedding, then a
    # 1x1 scalar projection per position.
    return (nets.conv(192, 1), nets.relu(),
            nets.conv(512, 1), nets.relu(),
            nets.conv(512, 1), nets.relu(),
            nets.conv(1, 1))


def _prior_disc_specs():
    # Three linear layers, 1000/200/1 nodes, sigmoid output probability.
    return (nets.linear(1000), nets.relu(),
            nets.linear(200), nets.relu(),
            nets.linear(1), nets.sigmoid())


@dataclass
class RepresentationModel:
    """Frozen product of stage one; `embed` is the only downstream surface."""
    encoder: NetworkParams
    global_disc: NetworkParams
    local_disc: NetworkParams
    prior_disc: NetworkParams
    z_dim: int

    def embed(self, frames, batch_size: int = 64) -> np.ndarray:
        return _embed_with_net(self.encoder, frames, batch_size)


@dataclass
class AutoencoderModel:
    """Convolutional autoencoder; scorer for the zero-shot baseline and
    feature source for the encoder-swap ablation."""
    encoder: NetworkParams
    decoder: NetworkParams
    z_dim: int
    train_mse: tuple[float, ...] = ()

    def embed(self, frames, batch_size: int = 64) -> np.ndarray:
        return _embed_with_net(self.encoder, frames, batch_size)

    def reconstruction_errors(self, frames, batch_size: int = 64) -> np.ndarray:
        x = np.stack([f.raster for f in frames])
        errors = []
        for start in range(0, len(x), batch_size):
            xb = x[start:start + batch_size]
            tape = Tape()
            z = nets.forward(nets.bind(self.encoder, tape), xb, mode="eval")
            recon = nets.forward(nets.bind(self.decoder, tape), z, mode="eval")
            errors.append(((recon.data - xb) ** 2).mean(axis=(1, 2, 3)))
        return np.concatenate(errors)


class RawPixelEmbedder:
    """Mean-pooled raw pixels (grid x grid x 3) as the no-learning feature
    source for the representation-learning ablation."""

    def __init__(self, grid: int = 8):
        self.grid = grid
        self.z_dim = grid * grid * 3

    def embed(self, frames, batch_size: int = 64) -> np.ndarray:
        x = np.stack([f.raster for f in frames])
        n, h, w, c = x.shape
        g = self.grid
        pooled = x.reshape(n, g, h // g, g, w // g, c).mean(axis=(2, 4))
        return pooled.reshape(n, -1)


def _embed_with_net(encoder: NetworkParams, frames, batch_size: int) -> np.ndarray:
    x = np.stack([f.raster for f in frames])
    out = []
    for start in range(0, len(x), batch_size):
        z = nets.forward(encoder, x[start:start + batch_size], mode="eval",
                         tape=Tape())
        out.append(z.data)
    return np.concatenate(out)


# ------------------------------------------------------------------ bounds


def dv_mi_lower_bound(joint_scores, marginal_scores):
    """Donsker-Varadhan lower bound: mean(joint) - ln mean exp(marginal).

    Accepts tensors (differentiable, for training) or arrays (measurement).
    The log-term is computed with a detached max shift, so scores up to
    about +-500 stay finite.
    """
    if isinstance(joint_scores, Tensor):
        if joint_scores.data.size == 0 or marginal_scores.data.size == 0:
            raise ValueError("dv_mi_lower_bound: empty score batch")
        return joint_scores.mean() - nd.logmeanexp(marginal_scores)
    joint = np.asarray(joint_scores, dtype=float)
    marginal = np.asarray(marginal_scores, dtype=float)
    if joint.size == 0 or marginal.size == 0:
        raise ValueError("dv_mi_lower_bound: empty score batch")
    shift = marginal.max()
    return float(joint.mean()
                 - (math.log(np.mean(np.exp(marginal - shift))) + shift))


def _local_dv(joint_map: Tensor, marginal_map: Tensor) -> Tensor:
    """Mean over positions of the per-position DV bound across the batch."""
    if joint_map.data.size == 0 or marginal_map.data.size == 0:
        raise ValueError("local DV: empty score batch")
    per_pos = (joint_map.mean(axis=0)
               - nd.logmeanexp(marginal_map, axis=0))
    return per_pos.mean()


def _softplus(x: Tensor) -> Tensor:
    """ln(1 + e^x) in the overflow-free form relu(x) + ln(1 + e^-|x|)."""
    tape = x.tape
    one = tape.constant(1.0)
    return nd.relu(x) + nd.log(one + nd.exp(abs(x) * (-1.0)))


def _log_sigmoid_pair(disc, x, tape: Tape) -> tuple[Tensor, Tensor]:
    """(ln F(x), ln(1 - F(x))) for a sigmoid-headed discriminator.

    Computed from the pre-sigmoid logit z as (-softplus(-z), -softplus(z)),
    which equals the clamped value-space logs wherever those are exact but
    keeps a live gradient when the sigmoid saturates in float64 — the
    regime where a value-space ln(1 - F + eps) would multiply an enormous
    loss slope by an exactly-zero sigmoid derivative and stall the
    adversary permanently.
    """
    specs = disc.params.specs if isinstance(disc, nets.Bound) else disc.specs
    if specs[-1].kind == "sigmoid":
        logit_idx = len(specs) - 2
        _, taps = nets.forward_taps(disc, x, mode="eval", tape=tape,
                                    taps=(logit_idx,))
        z = taps[logit_idx]
        return _softplus(z * (-1.0)) * (-1.0), _softplus(z) * (-1.0)
    f = nets.forward(disc, x, mode="eval", tape=tape)
    eps = tape.constant(EPS)
    one = tape.constant(1.0)
    return nd.log(f + eps), nd.log(one - f + eps)


def prior_adversarial_losses(embeddings: Tensor, prior_samples: Tensor,
                             prior_disc) -> tuple[Tensor, Tensor]:
    """Adversarial prior-matching pair (loss_F, loss_E).

    loss_F = -[mean ln F(v) + mean ln(1 - F(e))] with e detached: descending
    it trains the discriminator to tell prior samples from embeddings
    without moving the encoder. loss_E = -mean ln F(e) (non-saturating
    form) flows through the live embeddings. Both are evaluated in logit
    space (see _log_sigmoid_pair) so neither side can die of sigmoid
    saturation.
    """
    tape = embeddings.tape
    detached = tape.constant(embeddings.data.copy())
    ln_f_prior, _ = _log_sigmoid_pair(prior_disc, prior_samples, tape)
    _, ln_not_emb = _log_sigmoid_pair(prior_disc, detached, tape)
    ln_f_emb, _ = _log_sigmoid_pair(prior_disc, embeddings, tape)
    loss_f = -(ln_f_prior.mean() + ln_not_emb.mean())
    loss_e = -(ln_f_emb.mean())
    return loss_f, loss_e


# ------------------------------------------------------------------ stage 1


def _batches(order: np.ndarray, batch_size: int):
    """Consecutive index batches; a lone trailing frame joins the previous
    batch so no minibatch of size 1 is ever formed."""
    starts = list(range(0, len(order), batch_size))
    if len(starts) > 1 and len(order) - starts[-1] == 1:
        starts.pop()
    for i, start in enumerate(starts):
        stop = starts[i + 1] if i + 1 < len(starts) else len(order)
        yield order[start:stop]


def _permutation_matrix(perm: np.ndarray) -> np.ndarray:
    mat = np.zeros((len(perm), len(perm)))
    mat[np.arange(len(perm)), perm] = 1.0
    return mat


def _broadcast_embedding(e: Tensor, height: int, width: int) -> Tensor:
    b, z = e.data.shape
    return nd.broadcast_to(e.reshape(b, 1, 1, z), (b, height, width, z))


def _mi_scores(disc_bound, feats: Tensor, e: Tensor, e_shuffled: Tensor):
    """Discriminator scores for joint and shuffled (marginal) pairings."""
    _, h, w, _ = feats.data.shape
    joint_in = nd.concat([feats, _broadcast_embedding(e, h, w)], axis=3)
    marg_in = nd.concat([feats, _broadcast_embedding(e_shuffled, h, w)], axis=3)
    return (nets.forward(disc_bound, joint_in, mode="eval"),
            nets.forward(disc_bound, marg_in, mode="eval"))


def _standardize_head(encoder: nets.NetworkParams, ref: np.ndarray) -> None:
    """Rescale the encoder's final linear so embeddings of a reference
    batch start per-dimension mean 0, variance 1.

    The prior-matching game assumes embeddings live near N(0, I); a raw
    He-normal head starts them orders of magnitude off, which the
    adversary must first correct before any representation learning can
    happen. Standardizing at init (a data-dependent init in the LSUV
    family) starts the game at its equilibrium scale instead.
    """
    tape = Tape()
    _, taps = nets.forward_taps(encoder, ref, mode="eval", tape=tape,
                                taps=(_GLOBAL_TAP,))
    feats = taps[_GLOBAL_TAP].data.reshape(len(ref), -1)
    wkey = f"layer{len(encoder.specs) - 1}.w"
    bkey = f"layer{len(encoder.specs) - 1}.b"
    e0 = feats @ encoder.arrays[wkey]
    encoder.arrays[wkey] /= (e0.std(axis=0) + 1e-8)
    encoder.arrays[bkey] = -(feats @ encoder.arrays[wkey]).mean(axis=0)


def train_representation(frames, *, z_dim: int = 64, epochs: int = 300,
                         batch_size: int = 64, lr: float = 2e-4,
                         alpha: float = 0.5, beta: float = 0.1,
                         gamma: float = 1.0, seed: int = 0
                         ) -> RepresentationModel:
    """Stage one: encoder + discriminators trained on presumed-normal frames.

    Abnormal frames are rejected outright (the two-stage contract: no
    abnormal frame may influence the representation). Distractor frames
    are NOT rejected — spotting those is the frontend's job, and training
    on an unfiltered stream is exactly the contamination the robustness
    comparison measures.

    Each minibatch takes one prior-discriminator step (on detached
    embeddings) and then one joint step ascending
    alpha*global_MI + beta*mean local_MI - gamma*loss_E. Marginal pairings
    shuffle embeddings within the minibatch, so batches must have >= 2
    frames.
    """
    if any(f.label == ABNORMAL for f in frames):
        raise ValueError(
            "representation training must never see abnormal frames")
    if len(frames) < 2:
        raise ValueError("representation training needs >= 2 frames")
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2 (shuffle marginal "
                         "undefined on singleton batches)")
    x = np.stack([f.raster for f in frames])
    rng = np.random.default_rng(seed)
    init_seeds = rng.integers(2 ** 31, size=4)
    encoder = nets.init_params(_encoder_specs(z_dim), x.shape[1:],
                               seed=int(init_seeds[0]))
    _standardize_head(encoder, x[:min(128, len(x))])
    lh, lw, lc = 6, 6, 256
    gh, gw, gc = 2, 2, 512
    global_disc = nets.init_params(_global_disc_specs(), (gh, gw, gc + z_dim),
                                   seed=int(init_seeds[1]))
    local_disc = nets.init_params(_local_disc_specs(), (lh, lw, lc + z_dim),
                                  seed=int(init_seeds[2]))
    prior_disc = nets.init_params(_prior_disc_specs(), (z_dim,),
                                  seed=int(init_seeds[3]))
    joint_params = ({f"enc.{k}": v for k, v in encoder.arrays.items()}
                    | {f"gd.{k}": v for k, v in global_disc.arrays.items()}
                    | {f"ld.{k}": v for k, v in local_disc.arrays.items()})
    opt_joint = nd.adam(lr)
    opt_prior = nd.adam(lr)
    for _ in range(epochs):
        order = rng.permutation(len(x))
        for idx in _batches(order, batch_size):
            b = len(idx)
            tape = Tape()
            enc_bound = nets.bind(encoder, tape)
            out, taps = nets.forward_taps(
                enc_bound, x[idx], mode="eval",
                taps=(_LOCAL_TAP, _GLOBAL_TAP))
            e = out

            # Prior-discriminator step on a separate tape, detached inputs.
            ftape = Tape()
            f_bound = nets.bind(prior_disc, ftape)
            loss_f, _ = prior_adversarial_losses(
                ftape.constant(e.data.copy()),
                ftape.constant(rng.standard_normal((b, z_dim))),
                f_bound)
            fgrads = ftape.backward(loss_f)
            nd.optimizer_step(opt_prior, prior_disc.arrays,
                              f_bound.grads_by_name(fgrads))

            # Joint step against the just-updated prior discriminator.
            gd_bound = nets.bind(global_disc, tape)
            ld_bound = nets.bind(local_disc, tape)
            f_bound2 = nets.bind(prior_disc, tape)
            perm = rng.permutation(b)
            e_shuffled = nd.matmul(tape.constant(_permutation_matrix(perm)), e)
            gj, gm = _mi_scores(gd_bound, taps[_GLOBAL_TAP], e, e_shuffled)
            global_mi = dv_mi_lower_bound(gj.reshape(b), gm.reshape(b))
            lj, lm = _mi_scores(ld_bound, taps[_LOCAL_TAP], e, e_shuffled)
            local_mi = _local_dv(lj, lm)
            _, loss_e = prior_adversarial_losses(
                e, tape.constant(rng.standard_normal((b, z_dim))), f_bound2)
            loss = (global_mi * (-alpha) + local_mi * (-beta)
                    + loss_e * gamma)
            grads = tape.backward(loss)
            named = (enc_bound.grads_by_name(grads, prefix="enc.")
                     | gd_bound.grads_by_name(grads, prefix="gd.")
                     | ld_bound.grads_by_name(grads, prefix="ld."))
            nd.optimizer_step(opt_joint, joint_params, named)
    return RepresentationModel(encoder=encoder, global_disc=global_disc,
                               local_disc=local_disc, prior_disc=prior_disc,
                               z_dim=z_dim)


def measure_global_mi(model: RepresentationModel, frames,
                      batch_size: int = 64, seed: int = 0) -> float:
    """Global DV bound averaged over evaluation minibatches (no training)."""
    x = np.stack([f.raster for f in frames])
    rng = np.random.default_rng(seed)
    bounds = []
    for start in range(0, len(x), batch_size):
        xb = x[start:start + batch_size]
        if len(xb) < 2:
            continue
        b = len(xb)
        tape = Tape()
        out, taps = nets.forward_taps(nets.bind(model.encoder, tape), xb,
                                      mode="eval",
                                      taps=(_LOCAL_TAP, _GLOBAL_TAP))
        perm = rng.permutation(b)
        e_shuffled = nd.matmul(tape.constant(_permutation_matrix(perm)), out)
        gj, gm = _mi_scores(nets.bind(model.global_disc, tape),
                            taps[_GLOBAL_TAP], out, e_shuffled)
        bounds.append(dv_mi_lower_bound(gj.data.ravel(), gm.data.ravel()))
    if not bounds:
        raise ValueError("measure_global_mi: need a batch of >= 2 frames")
    return float(np.mean(bounds))


# ------------------------------------------------------------------ stage 2


def sin_loss(score, label, a: float = 6.0, mu: float = 0.0,
             sigma: float = 1.0):
    """Contrastive score loss on T(s) = (s - mu)/sigma.

    Normal frames pay |T(s)| (pull to the score prior's mean); abnormal
    frames pay max(0, a - T(s)) (push past the margin). ``label`` is a
    class string or a {0,1} abnormality flag (arrays allowed when ``score``
    is a Tensor); the subgradient at both kinks is 0.
    """
    if a <= 0:
        raise ValueError("margin a must be positive")
    flag = _abnormal_flag(label)
    if isinstance(score, Tensor):
        tape = score.tape
        t = (score - tape.constant(mu)) * (1.0 / sigma)
        y = tape.constant(np.asarray(flag, dtype=float))
        one = tape.constant(1.0)
        return ((one - y) * abs(t)
                + y * nd.relu(tape.constant(float(a)) - t)).mean()
    t = (float(score) - mu) / sigma
    return float(max(0.0, a - t) if flag else abs(t))


def _abnormal_flag(label):
    if isinstance(label, str):
        if label == ABNORMAL:
            return 1
        if label == NORMAL:
            return 0
        raise ValueError(f"sin_loss: unknown class label {label!r}")
    return np.asarray(label)


@dataclass
class SinModel:
    """Score-inference head over a frozen feature source."""
    params: NetworkParams
    a: float
    mu: float = 0.0
    sigma: float = 1.0

    def score(self, features: np.ndarray) -> np.ndarray:
        out = nets.forward(self.params, features, mode="eval", tape=Tape())
        return out.data.ravel()


def _sin_specs():
    return (nets.linear(64), nets.relu(), nets.linear(1))


def train_sin(embedder, frames, *, a: float = 6.0, epochs: int = 200,
              batch_size: int = 64, lr: float = 1e-3, seed: int = 0,
              loss: str = "margin") -> SinModel:
    """Stage two: train the score MLP on frozen features.

    Frames not labelled abnormal count as presumed-normal (an unfiltered
    stream may smuggle distractors in here; that is the contamination the
    frontend exists to remove). Batches are class-balanced: half normal
    frames (each epoch visits all of them once, shuffled), half abnormal
    frames resampled with replacement, since the abnormal pool is
    few-shot. ``loss`` selects the margin objective or its
    binary-cross-entropy ablation.
    """
    if loss not in ("margin", "bce"):
        raise ValueError(f"train_sin: unknown loss {loss!r}")
    flags = np.array([1.0 if f.label == ABNORMAL else 0.0 for f in frames])
    if not flags.any():
        raise ValueError(
            "train_sin needs at least one abnormal frame; with zero "
            "abnormal examples use the zero-shot autoencoder baseline "
            "(ae_baseline) instead")
    if not (1.0 - flags).any():
        raise ValueError("train_sin needs at least one normal frame")
    features = embedder.embed(frames)
    normal_idx = np.flatnonzero(flags == 0.0)
    abnormal_idx = np.flatnonzero(flags == 1.0)
    params = nets.init_params(_sin_specs(), (features.shape[1],), seed=seed)
    opt = nd.adam(lr)
    rng = np.random.default_rng(seed)
    half = max(1, batch_size // 2)
    for _ in range(epochs):
        order = rng.permutation(normal_idx)
        for start in range(0, len(order), half):
            n_part = order[start:start + half]
            a_part = rng.choice(abnormal_idx, size=len(n_part), replace=True)
            idx = np.concatenate([n_part, a_part])
            tape = Tape()
            bound = nets.bind(params, tape)
            scores = nets.forward(bound, features[idx], mode="eval")
            scores = scores.reshape(len(idx))
            y = flags[idx]
            if loss == "margin":
                batch_loss = sin_loss(scores, y, a=a)
            else:
                p = nd.sigmoid(scores)
                yb = tape.constant(y)
                one = tape.constant(1.0)
                eps = tape.constant(EPS)
                batch_loss = -((yb * nd.log(p + eps)
                                + (one - yb) * nd.log(one - p + eps)).mean())
            grads = tape.backward(batch_loss)
            nd.optimizer_step(opt, params.arrays, bound.grads_by_name(grads))
    return SinModel(params=params, a=a)


def anomaly_scores(embedder, sin: SinModel, frames) -> np.ndarray:
    """s = S(E(x)) for each frame, deterministic in eval mode."""
    return sin.score(embedder.embed(frames))


def anomaly_score(embedder, sin: SinModel, frame: SynthFrame) -> float:
    return float(anomaly_scores(embedder, sin, [frame])[0])


def classify(scores, tau: float) -> list[str]:
    """Threshold rule on precomputed scores: abnormal iff s > tau."""
    return [ABNORMAL if s > tau else NORMAL for s in np.asarray(scores)]


# ------------------------------------------------------------------ baseline


def _ae_specs(z_dim: int):
    encoder = (nets.conv(32, 4, stride=2), nets.relu(),
               nets.conv(64, 4, stride=2), nets.relu(),
               nets.conv(128, 4, stride=2), nets.relu(),
               nets.linear(z_dim))
    decoder = (nets.linear(4 * 4 * 128), nets.relu(),
               nets.reshape((4, 4, 128)),
               nets.upsample(2), nets.conv(64, 3, padding=1), nets.relu(),
               nets.upsample(2), nets.conv(32, 3, padding=1), nets.relu(),
               nets.upsample(2), nets.conv(16, 3, padding=1), nets.relu(),
               nets.upsample(2), nets.conv(3, 3, padding=1))
    return encoder, decoder


def ae_baseline(frames, *, z_dim: int = 64, epochs: int = 20,
                batch_size: int = 64, lr: float = 1e-3,
                seed: int = 0) -> AutoencoderModel:
    """Convolutional autoencoder on the frames given (presumed normal).

    Reconstruction MSE is the zero-shot anomaly score; the encoder can
    also replace the MI-trained encoder as a SIN feature source (the
    encoder-swap ablation). Per-epoch train MSE is recorded for the
    optimization sanity check.
    """
    x = np.stack([f.raster for f in frames])
    enc_specs, dec_specs = _ae_specs(z_dim)
    rng = np.random.default_rng(seed)
    init_seeds = rng.integers(2 ** 31, size=2)
    encoder = nets.init_params(enc_specs, x.shape[1:], seed=int(init_seeds[0]))
    decoder = nets.init_params(dec_specs, (z_dim,), seed=int(init_seeds[1]))
    params = ({f"enc.{k}": v for k, v in encoder.arrays.items()}
              | {f"dec.{k}": v for k, v in decoder.arrays.items()})
    opt = nd.adam(lr)
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(x))
        epoch_losses = []
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            xb = x[idx]
            tape = Tape()
            enc_bound = nets.bind(encoder, tape)
            dec_bound = nets.bind(decoder, tape)
            z = nets.forward(enc_bound, xb, mode="eval")
            recon = nets.forward(dec_bound, z, mode="eval")
            diff = recon - tape.constant(xb)
            mse = (diff * diff).mean()
            grads = tape.backward(mse)
            named = (enc_bound.grads_by_name(grads, prefix="enc.")
                     | dec_bound.grads_by_name(grads, prefix="dec."))
            nd.optimizer_step(opt, params, named)
            epoch_losses.append(float(mse.data))
        history.append(float(np.mean(epoch_losses)))
    return AutoencoderModel(encoder=encoder, decoder=decoder, z_dim=z_dim,
                            train_mse=tuple(history))
