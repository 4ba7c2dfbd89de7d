"""Two-stream masked autoencoding backbone with shared fusion.

Patches embed linearly plus a learned positional table per modality, pass
through per-modality pre-norm transformer encoders, and meet in a shared
fusion encoder. Three paths leave the fusion stage:

* joint fusion over both modalities -> tokens (o_a, o_v) consumed by the
  matching module and, with masked slots replaced by a learned mask token,
  by the reconstruction decoder;
* single-modality fusion + per-modality layernorm + visibility-weighted
  mean pool + L2 normalization -> pooled contrastive features (c_a, c_v).

Masking semantics: masked tokens are invisible to every attention layer
(key masking), which is exactly equivalent to dropping them from the
sequence — all other ops are per-token — while keeping batches rectangular
under iid Bernoulli masking. Outputs at masked slots are never consumed
except by the decoder, which first overwrites them with mask token +
positional embedding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

import avcl.tensor as tt
from avcl.data import PatchSet, SceneGeometry
from avcl.tensor import Tensor

_NEG_BIAS = -1e30  # exp() underflows to exactly 0 after max subtraction


@dataclass(frozen=True)
class BackboneConfig:
    embed_dim: int = 32
    heads: int = 4
    encoder_layers: int = 2
    fusion_layers: int = 1
    decoder_layers: int = 1
    mlp_ratio: int = 2
    mask_prob: float = 0.8
    temperature: float = 0.07  # contrastive softmax temperature
    contrastive_weight: float = 0.1  # weight of the contrastive term
    layernorm_eps: float = 1e-6

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be a multiple of heads")
        if not 0.0 <= self.mask_prob < 1.0:
            raise ValueError("mask_prob must lie in [0, 1)")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads


@dataclass
class BackboneState:
    cfg: BackboneConfig
    geom: SceneGeometry
    params: dict[str, Tensor] = field(default_factory=dict)

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if k not in arrays:
                raise KeyError(f"missing parameter {k!r}")
            if arrays[k].shape != p.shape:
                raise ValueError(f"shape mismatch for {k!r}")
            p.data = np.ascontiguousarray(arrays[k], dtype=np.float64)


# ---------------------------------------------------------------------------
# init
# ---------------------------------------------------------------------------


def _init_block(params, prefix, dim, hidden, rng):
    params[f"{prefix}/ln1/gain"] = tt.parameter(np.ones(dim))
    params[f"{prefix}/ln1/bias"] = tt.parameter(np.zeros(dim))
    for name in ("wq", "wk", "wv", "wo"):
        params[f"{prefix}/attn/{name}"] = tt.parameter((dim, dim), rng)
        params[f"{prefix}/attn/b{name[1]}"] = tt.parameter(np.zeros(dim))
    params[f"{prefix}/ln2/gain"] = tt.parameter(np.ones(dim))
    params[f"{prefix}/ln2/bias"] = tt.parameter(np.zeros(dim))
    params[f"{prefix}/mlp/w1"] = tt.parameter((dim, hidden), rng)
    params[f"{prefix}/mlp/b1"] = tt.parameter(np.zeros(hidden))
    params[f"{prefix}/mlp/w2"] = tt.parameter((hidden, dim), rng)
    params[f"{prefix}/mlp/b2"] = tt.parameter(np.zeros(dim))


def init_backbone(cfg: BackboneConfig, geom: SceneGeometry,
                  rng: np.random.Generator) -> BackboneState:
    d = cfg.embed_dim
    hidden = cfg.mlp_ratio * d
    a, v = geom.audio, geom.video
    p: dict[str, Tensor] = {}
    p["audio_embed/weight"] = tt.parameter((a.patch_dim, d), rng)
    p["audio_embed/bias"] = tt.parameter(np.zeros(d))
    p["video_embed/weight"] = tt.parameter((v.patch_dim, d), rng)
    p["video_embed/bias"] = tt.parameter(np.zeros(d))
    p["audio_pos"] = tt.parameter((a.patches, d), rng)
    p["video_pos"] = tt.parameter((v.patches, d), rng)
    p["audio_mask_token"] = tt.parameter((d,), rng)
    p["video_mask_token"] = tt.parameter((d,), rng)
    for i in range(cfg.encoder_layers):
        _init_block(p, f"enc_audio/{i}", d, hidden, rng)
        _init_block(p, f"enc_video/{i}", d, hidden, rng)
    for i in range(cfg.fusion_layers):
        _init_block(p, f"fusion/{i}", d, hidden, rng)
    for i in range(cfg.decoder_layers):
        _init_block(p, f"decoder/{i}", d, hidden, rng)
    p["ln_audio/gain"] = tt.parameter(np.ones(d))
    p["ln_audio/bias"] = tt.parameter(np.zeros(d))
    p["ln_video/gain"] = tt.parameter(np.ones(d))
    p["ln_video/bias"] = tt.parameter(np.zeros(d))
    p["decoder_head_audio/weight"] = tt.parameter((d, a.patch_dim), rng)
    p["decoder_head_audio/bias"] = tt.parameter(np.zeros(a.patch_dim))
    p["decoder_head_video/weight"] = tt.parameter((d, v.patch_dim), rng)
    p["decoder_head_video/bias"] = tt.parameter(np.zeros(v.patch_dim))
    return BackboneState(cfg, geom, p)


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------


def key_bias(mask: np.ndarray | None) -> Tensor | None:
    """(B, n) True=masked -> (B, 1, 1, n) additive attention bias."""
    if mask is None or not mask.any():
        return None
    return Tensor((_NEG_BIAS * mask.astype(np.float64))[:, None, None, :])


def embed(ps: PatchSet, state: BackboneState) -> Tensor:
    """out[b, i] = W . patch[b, i] + bias + pos[original_index[b, i]]."""
    p = state.params
    w = p[f"{ps.modality}_embed/weight"]
    b = p[f"{ps.modality}_embed/bias"]
    pos = p[f"{ps.modality}_pos"]
    x = tt.linear(Tensor(ps.patches), w, b)
    return tt.add(x, tt.gather_rows(pos, ps.indices))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return tt.transpose(tt.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, hd = x.shape
    return tt.reshape(tt.transpose(x, (0, 2, 1, 3)), (b, n, h * hd))


def _attention(params, prefix, x: Tensor, bias: Tensor | None, heads: int) -> Tensor:
    q = _split_heads(tt.linear(x, params[f"{prefix}/attn/wq"], params[f"{prefix}/attn/bq"]), heads)
    k = _split_heads(tt.linear(x, params[f"{prefix}/attn/wk"], params[f"{prefix}/attn/bk"]), heads)
    v = _split_heads(tt.linear(x, params[f"{prefix}/attn/wv"], params[f"{prefix}/attn/bv"]), heads)
    logits = tt.attention_logits(q, k)
    if bias is not None:
        logits = tt.add(logits, bias)
    out = tt.matmul(tt.softmax(logits, axis=-1), v)
    return tt.linear(_merge_heads(out), params[f"{prefix}/attn/wo"], params[f"{prefix}/attn/bo"])


def _block(params, prefix, x: Tensor, bias: Tensor | None, cfg: BackboneConfig) -> Tensor:
    eps = cfg.layernorm_eps
    h = tt.layernorm(x, params[f"{prefix}/ln1/gain"], params[f"{prefix}/ln1/bias"], eps)
    x = tt.add(x, _attention(params, prefix, h, bias, cfg.heads))
    h = tt.layernorm(x, params[f"{prefix}/ln2/gain"], params[f"{prefix}/ln2/bias"], eps)
    m = tt.linear(tt.gelu(tt.linear(h, params[f"{prefix}/mlp/w1"], params[f"{prefix}/mlp/b1"])),
                  params[f"{prefix}/mlp/w2"], params[f"{prefix}/mlp/b2"])
    return tt.add(x, m)


def _stack(params, base, count, x, bias, cfg):
    for i in range(count):
        x = _block(params, f"{base}/{i}", x, bias, cfg)
    return x


def encode_modality(state: BackboneState, x: Tensor, modality: str,
                    mask: np.ndarray | None) -> Tensor:
    return _stack(state.params, f"enc_{modality}", state.cfg.encoder_layers,
                  x, key_bias(mask), state.cfg)


@dataclass
class FusedForward:
    o_a: Tensor  # (B, M, D) joint-fusion audio tokens
    o_v: Tensor  # (B, N, D) joint-fusion video tokens
    a_tilde: Tensor  # (B, M, D) decoder input, masked slots = mask token + pos
    v_tilde: Tensor
    enc_a: Tensor  # (B, M, D) per-modality encoder outputs, pre-fusion;
    enc_v: Tensor  # the contrastive path pools these through its own pass


def forward_fused(state: BackboneState, a_emb: Tensor, v_emb: Tensor,
                  m_a: np.ndarray | None, m_v: np.ndarray | None,
                  a_indices: np.ndarray | None = None,
                  v_indices: np.ndarray | None = None) -> FusedForward:
    """Per-modality encoders on visible tokens, joint fusion, split back.

    ``a_indices``/``v_indices`` are the original grid indices of each token
    (defaults to 0..n-1), used to position mask tokens for the decoder.
    """
    cfg, params = state.cfg, state.params
    na, nv = a_emb.shape[1], v_emb.shape[1]
    ea = encode_modality(state, a_emb, "audio", m_a)
    ev = encode_modality(state, v_emb, "video", m_v)

    joint_mask = None
    if m_a is not None or m_v is not None:
        b = a_emb.shape[0]
        ja = m_a if m_a is not None else np.zeros((b, na), dtype=bool)
        jv = m_v if m_v is not None else np.zeros((b, nv), dtype=bool)
        joint_mask = np.concatenate([ja, jv], axis=1)
    fused = _stack(params, "fusion", cfg.fusion_layers,
                   tt.concat([ea, ev], axis=1), key_bias(joint_mask), cfg)
    o_a = tt.narrow(fused, 1, 0, na)
    o_v = tt.narrow(fused, 1, na, nv)

    a_tilde = _decoder_input(state, o_a, m_a, a_indices, "audio")
    v_tilde = _decoder_input(state, o_v, m_v, v_indices, "video")
    return FusedForward(o_a, o_v, a_tilde, v_tilde, ea, ev)


def _decoder_input(state: BackboneState, o: Tensor, mask: np.ndarray | None,
                   indices: np.ndarray | None, modality: str) -> Tensor:
    if mask is None or not mask.any():
        return o
    b, n, d = o.shape
    if indices is None:
        indices = np.broadcast_to(np.arange(n), (b, n))
    params = state.params
    tok = tt.add(tt.reshape(params[f"{modality}_mask_token"], (1, 1, d)),
                 tt.gather_rows(params[f"{modality}_pos"], np.asarray(indices)))
    m = Tensor(mask.astype(np.float64)[:, :, None])
    return tt.add(tt.mul(o, tt.sub(1.0, m)), tt.mul(tok, m))


def decode(state: BackboneState, a_tilde: Tensor, v_tilde: Tensor) -> tuple[Tensor, Tensor]:
    """Shared decoder block(s) per modality, then per-modality linear heads."""
    cfg, params = state.cfg, state.params
    da = _stack(params, "decoder", cfg.decoder_layers, a_tilde, None, cfg)
    dv = _stack(params, "decoder", cfg.decoder_layers, v_tilde, None, cfg)
    rec_a = tt.linear(da, params["decoder_head_audio/weight"], params["decoder_head_audio/bias"])
    rec_v = tt.linear(dv, params["decoder_head_video/weight"], params["decoder_head_video/bias"])
    return rec_a, rec_v


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _masked_recon_term(recon: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Per-sample mean squared error over masked patch elements, batch-meaned."""
    b, n, pd = recon.shape
    diff = tt.sub(recon, Tensor(target))
    se = tt.mul(diff, diff)
    m = Tensor(mask.astype(np.float64)[:, :, None])
    per_sample = tt.sum_(tt.mul(se, m), axis=(1, 2))  # (B,)
    counts = mask.sum(axis=1).astype(np.float64)
    denom = np.maximum(counts, 1.0) * pd  # zero-mask rows contribute 0 anyway
    return tt.mean(tt.div(per_sample, Tensor(denom)))


def reconstruction_loss(recon_a: Tensor, recon_v: Tensor,
                        target_a: np.ndarray, target_v: np.ndarray,
                        m_a: np.ndarray, m_v: np.ndarray) -> Tensor:
    """Sum over modalities of batch-mean masked-element MSE.

    Unmasked positions never contribute; a batch with nothing masked in
    either modality has no defined target and raises.
    """
    if not m_a.any() and not m_v.any():
        raise tt.ShapeError("reconstruction loss undefined: nothing is masked")
    return tt.add(_masked_recon_term(recon_a, target_a, m_a),
                  _masked_recon_term(recon_v, target_v, m_v))


def contrastive_features(state: BackboneState, enc_a: Tensor, enc_v: Tensor,
                         m_a: np.ndarray | None, m_v: np.ndarray | None
                         ) -> tuple[Tensor, Tensor]:
    """Single-modality fusion pass + modality layernorm + visible-mean pool.

    Takes the per-modality ENCODER outputs (``FusedForward.enc_a``/``enc_v``
    — one encoder pass serves both objectives). The fusion blocks then run
    over one modality's tokens alone (no cross-modal concatenation), so each
    pooled feature depends only on its own modality — the cross-modal tie
    comes solely from the contrastive objective.
    """
    cfg, params = state.cfg, state.params

    def pooled(enc, mask, tag):
        f = _stack(params, "fusion", cfg.fusion_layers, enc, key_bias(mask), cfg)
        f = tt.layernorm(f, params[f"ln_{tag}/gain"], params[f"ln_{tag}/bias"],
                         cfg.layernorm_eps)
        if mask is not None and mask.any():
            w = Tensor((~mask).astype(np.float64)[:, :, None])
            pool = tt.weighted_mean_pool(f, axis=1, weights=w)
        else:
            pool = tt.mean(f, axis=1)
        return tt.l2_normalize(pool, axis=-1)

    return pooled(enc_a, m_a, "audio"), pooled(enc_v, m_v, "video")


def contrastive_loss(c_a: Tensor, c_v: Tensor, temperature: float) -> Tensor:
    """Symmetric paired-softmax loss over the batch similarity matrix.

    loss = -(1/B) * sum_i [log softmax_row(S)_ii + log softmax_col(S)_ii]
    with S = c_a c_v^T / temperature. Requires B >= 2.
    """
    b = c_a.shape[0]
    if b < 2:
        raise tt.ShapeError("contrastive loss needs at least two pairs")
    sims = tt.mul(tt.matmul(c_a, tt.swap_last(c_v)), 1.0 / temperature)
    eye = Tensor(np.eye(b))
    diag_row = tt.sum_(tt.mul(tt.log(tt.softmax(sims, axis=1)), eye))
    diag_col = tt.sum_(tt.mul(tt.log(tt.softmax(sims, axis=0)), eye))
    return tt.mul(tt.add(diag_row, diag_col), -1.0 / b)


def pretrain_objective(recon: Tensor, contrast: Tensor, penalty: Tensor | None,
                       contrastive_weight: float, penalty_weight: float) -> Tensor:
    """total = recon + lambda * contrast + alpha * penalty (penalty optional)."""
    total = tt.add(recon, tt.mul(contrast, contrastive_weight))
    if penalty is not None and penalty_weight != 0.0:
        total = tt.add(total, tt.mul(penalty, penalty_weight))
    return total
