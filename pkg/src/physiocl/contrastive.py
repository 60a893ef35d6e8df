"""Projection head, cosine similarity, and the contrastive losses.

The temporal loss treats same-slot clips from two subjects as the positive
pair; negatives are every other slot from either subject.  For one anchor at
slot i of subject A:

    loss = -log(S1 / (S2 + S3))
    S1 = exp(sim(z[i,A], z[i,B]) / tau)
    S2 = sum over j != i of exp(sim(z[i,A], z[j,A]) / tau)
    S3 = sum over all j  of exp(sim(z[i,A], z[j,B]) / tau)

Note S3 runs over *all* j, so the positive term also appears in the
denominator; set `exclude_positive_in_s3` for the canonical variant that
drops it.  The batch loss sums both subjects' anchors over every slot.
The cross-modal loss reuses the same structure with the two modalities of
one subject playing the two roles, summed over both subjects.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor


@dataclass
class LossWeights:
    alpha: float = 0.5   # intra-modal loss weight, EEG
    beta: float = 0.5    # intra-modal loss weight, peripheral signals
    gamma: float = 1.0   # cross-modal loss weight
    tau: float = 0.1     # similarity temperature
    exclude_positive_in_s3: bool = False

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0 or self.tau <= 0:
            raise ValueError("loss weights must be nonnegative and tau positive")


class Projector:
    """Nonlinear projection head between encoder features and the losses."""

    def __init__(self, in_dim: int, rng: np.random.Generator,
                 hidden_dim: int = 256, out_dim: int = 128, dropout_p: float = 0.1):
        self.in_dim, self.hidden_dim, self.out_dim = in_dim, hidden_dim, out_dim
        self.dropout_p = dropout_p
        lin = lambda fan_in, *shape: rng.standard_normal(shape) / math.sqrt(fan_in)
        self.params = {
            "w1": ad.parameter(lin(in_dim, in_dim, hidden_dim)),
            "b1": ad.parameter(np.zeros(hidden_dim)),
            "bn1.gamma": ad.parameter(np.ones(hidden_dim)),
            "bn1.beta": ad.parameter(np.zeros(hidden_dim)),
            "w2": ad.parameter(lin(hidden_dim, hidden_dim, hidden_dim)),
            "b2": ad.parameter(np.zeros(hidden_dim)),
            "bn2.gamma": ad.parameter(np.ones(hidden_dim)),
            "bn2.beta": ad.parameter(np.zeros(hidden_dim)),
            "w3": ad.parameter(lin(hidden_dim, hidden_dim, out_dim)),
            "b3": ad.parameter(np.zeros(out_dim)),
        }
        self.bn1 = BatchNormState(hidden_dim)
        self.bn2 = BatchNormState(hidden_dim)

    def project(self, features, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """ReLU(BN(W1 h + b1)) -> Dropout(BN(W2 · + b2)) -> W3 · + b3."""
        p = self.params
        h = ad.as_tensor(features)
        h1 = ad.relu(ad.batch_norm(ad.add(ad.matmul(h, p["w1"]), p["b1"]),
                                   p["bn1.gamma"], p["bn1.beta"], self.bn1, train))
        h2 = ad.batch_norm(ad.add(ad.matmul(h1, p["w2"]), p["b2"]),
                           p["bn2.gamma"], p["bn2.beta"], self.bn2, train)
        h2 = ad.dropout(h2, self.dropout_p, rng, train)
        return ad.add(ad.matmul(h2, p["w3"]), p["b3"])

    def named_params(self) -> dict:
        return dict(self.params)

    def named_arrays(self) -> dict:
        out = {name: t.data.copy() for name, t in self.params.items()}
        for tag, st in (("bn1", self.bn1), ("bn2", self.bn2)):
            out[f"{tag}.running_mean"] = st.running_mean.copy()
            out[f"{tag}.running_var"] = st.running_var.copy()
        return out

    def load_arrays(self, arrays: dict, prefix: str = "") -> None:
        dt = ad.default_dtype()
        for name, t in self.params.items():
            t.data = arrays[prefix + name].astype(dt)
        for tag, st in (("bn1", self.bn1), ("bn2", self.bn2)):
            st.running_mean = arrays[prefix + f"{tag}.running_mean"].astype(dt)
            st.running_var = arrays[prefix + f"{tag}.running_var"].astype(dt)


class CrossModalMap:
    """Shared linear map applied to both modalities' embeddings before CM similarity."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.params = {
            "w": ad.parameter(rng.standard_normal((dim, dim)) / math.sqrt(dim)),
            "b": ad.parameter(np.zeros(dim)),
        }

    def apply(self, z) -> Tensor:
        return ad.add(ad.matmul(ad.as_tensor(z), self.params["w"]), self.params["b"])

    def named_params(self) -> dict:
        return dict(self.params)

    def named_arrays(self) -> dict:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_arrays(self, arrays: dict, prefix: str = "") -> None:
        dt = ad.default_dtype()
        for name, t in self.params.items():
            t.data = arrays[prefix + name].astype(dt)


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of two nonzero vectors, in [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity undefined for zero vectors")
    return float(a @ b / (na * nb))


def tcl_anchor_loss(anchors: np.ndarray, others: np.ndarray, i: int, tau: float,
                    exclude_positive_in_s3: bool = False) -> float:
    """Loss of one anchor (row i of `anchors`) against its aligned batch."""
    m = anchors.shape[0]
    if m < 2:
        raise ValueError("anchor loss needs at least two slots")
    za = np.asarray(anchors, dtype=np.float64)
    zb = np.asarray(others, dtype=np.float64)
    na = za / np.linalg.norm(za, axis=1, keepdims=True)
    nb = zb / np.linalg.norm(zb, axis=1, keepdims=True)
    s_same = na @ na[i]
    s_cross = nb @ na[i]
    s2 = np.exp(s_same / tau)
    s2[i] = 0.0
    s3 = np.exp(s_cross / tau)
    if exclude_positive_in_s3:
        s3[i] = 0.0
    return float(np.log(s2.sum() + s3.sum()) - s_cross[i] / tau)


def _ntxent_pair(z_first: Tensor, z_second: Tensor, tau: float,
                 exclude_positive_in_s3: bool) -> Tensor:
    """Both-role batch loss for two aligned embedding stacks [M, d]."""
    if z_first.shape != z_second.shape:
        raise ValueError(f"misaligned embedding batches: {z_first.shape} vs {z_second.shape}")
    if z_first.shape[0] < 2:
        raise ValueError("batch loss needs at least two slots")
    na = ad.l2_normalize(z_first)
    nb = ad.l2_normalize(z_second)
    inv_tau = 1.0 / tau
    s_ab = ad.matmul(na, ad.transpose(nb))
    e_ab = ad.exp(ad.scale(s_ab, inv_tau))
    e_aa = ad.exp(ad.scale(ad.matmul(na, ad.transpose(na)), inv_tau))
    e_bb = ad.exp(ad.scale(ad.matmul(nb, ad.transpose(nb)), inv_tau))

    log_s1 = ad.scale(ad.diag_part(s_ab), inv_tau)
    pos_term = ad.diag_part(e_ab)
    s2_a = ad.sub(e_aa.sum(axis=1), ad.diag_part(e_aa))
    s3_a = e_ab.sum(axis=1)
    s2_b = ad.sub(e_bb.sum(axis=1), ad.diag_part(e_bb))
    s3_b = e_ab.sum(axis=0)
    if exclude_positive_in_s3:
        s3_a = ad.sub(s3_a, pos_term)
        s3_b = ad.sub(s3_b, pos_term)
    loss_a = ad.sub(ad.log(ad.add(s2_a, s3_a)), log_s1).sum()
    loss_b = ad.sub(ad.log(ad.add(s2_b, s3_b)), log_s1).sum()
    return ad.add(loss_a, loss_b)


def tcl_batch_loss(emb_a, emb_b, tau: float, exclude_positive_in_s3: bool = False) -> Tensor:
    """Temporal contrastive loss of a paired mini-batch, summed over all anchors."""
    return _ntxent_pair(ad.as_tensor(emb_a), ad.as_tensor(emb_b), tau, exclude_positive_in_s3)


def cmcl_loss(emb_eeg_a, emb_eeg_b, emb_pps_a, emb_pps_b, tau: float,
              exclude_positive_in_s3: bool = False) -> Tensor:
    """Cross-modal loss: the two modalities play the two roles, per subject."""
    ze_a, ze_b = ad.as_tensor(emb_eeg_a), ad.as_tensor(emb_eeg_b)
    zp_a, zp_b = ad.as_tensor(emb_pps_a), ad.as_tensor(emb_pps_b)
    if not (ze_a.shape == ze_b.shape == zp_a.shape == zp_b.shape):
        raise ValueError("cross-modal loss requires four aligned embedding stacks")
    loss_a = _ntxent_pair(ze_a, zp_a, tau, exclude_positive_in_s3)
    loss_b = _ntxent_pair(ze_b, zp_b, tau, exclude_positive_in_s3)
    return ad.add(loss_a, loss_b)


def total_loss(l_eeg, l_pps, l_cc, weights: LossWeights) -> Tensor:
    """Weighted pretraining objective alpha*L_eeg + beta*L_pps + gamma*L_cc.

    Components may be scalar Tensors or plain floats; a None component (or a
    zero weight) drops out of the sum, which is how the ablation toggles
    disable individual losses.
    """
    terms = []
    for w, comp in ((weights.alpha, l_eeg), (weights.beta, l_pps), (weights.gamma, l_cc)):
        if comp is None or w == 0.0:
            continue
        terms.append(ad.scale(ad.as_tensor(comp), w))
    if not terms:
        raise ValueError("total loss needs at least one enabled component")
    acc = terms[0]
    for t in terms[1:]:
        acc = ad.add(acc, t)
    return acc
