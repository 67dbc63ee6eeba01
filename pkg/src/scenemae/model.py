"""Student network: patch tokenizer, transformer encoder/decoder, reconstruction and projection heads.

The layout follows the usual masked point-modeling recipe. Only VISIBLE
patches are tokenized and encoded. The decoder sees the encoded visible tokens
followed by one shared learnable mask token per MASKED patch; DROPPED patches
never enter the network. Positional embeddings of the patch centers are added
at the input of every block in both stacks.

Samples in a batch carry different token counts, so sequences are right-padded
and padded keys are excluded from attention.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
from torch.nn.utils.rnn import pad_sequence

from .masking import PatchState


class ContractError(ValueError):
    """Tensor shapes or counts disagree with what the caller promised."""


@dataclass
class ModelConfig:
    embed_dim: int = 384
    encoder_depth: int = 6
    decoder_depth: int = 3
    n_heads: int = 6
    mlp_ratio: float = 4.0
    drop_path: float = 0.1
    patch_size: int = 32
    patch_count: int = 128
    d_img: int = 64
    d_txt: int = 64
    tokenizer_hidden: int = 128
    pos_hidden: int = 128

    def __post_init__(self):
        if self.embed_dim % self.n_heads:
            raise ContractError(f"embed_dim {self.embed_dim} is not divisible by n_heads {self.n_heads}")
        if self.encoder_depth < 1 or self.decoder_depth < 1:
            raise ContractError("encoder and decoder depth must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ContractError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)


PROFILES = {
    # Point-MAE-sized backbone with depths 6/3.
    "base": ModelConfig(),
    "desk": ModelConfig(embed_dim=64, n_heads=4, patch_size=16, patch_count=64, tokenizer_hidden=64, pos_hidden=64),
    "tiny": ModelConfig(embed_dim=32, encoder_depth=2, decoder_depth=1, n_heads=4, drop_path=0.0,
                        patch_size=16, patch_count=32, tokenizer_hidden=32, pos_hidden=32),
    "gradcheck": ModelConfig(embed_dim=8, encoder_depth=2, decoder_depth=1, n_heads=2, drop_path=0.0,
                             patch_size=4, patch_count=8, d_img=8, d_txt=8, tokenizer_hidden=8, pos_hidden=8),
}


def _mlp(d_in, d_hidden, d_out):
    return nn.Sequential(nn.Linear(d_in, d_hidden), nn.GELU(), nn.Linear(d_hidden, d_out))


class PatchEmbed(nn.Module):
    """Shared per-point MLP followed by a max-pool over the patch's points."""

    def __init__(self, embed_dim, hidden):
        super().__init__()
        self.point_mlp = _mlp(3, hidden, embed_dim)

    def forward(self, local_coords):
        # (..., K, 3) -> (..., D)
        return self.point_mlp(local_coords).amax(dim=-2)


class PosEmbed(nn.Module):
    def __init__(self, embed_dim, hidden):
        super().__init__()
        self.mlp = _mlp(3, hidden, embed_dim)

    def forward(self, centers):
        return self.mlp(centers)


class DropPath(nn.Module):
    """Per-sample stochastic depth on the residual branch."""

    def __init__(self, p=0.0):
        super().__init__()
        self.p = p

    def forward(self, x):
        if self.p == 0.0 or not self.training:
            return x
        keep = 1.0 - self.p
        mask = x.new_empty((x.shape[0],) + (1,) * (x.ndim - 1)).bernoulli_(keep)
        return x * mask / keep


class Attention(nn.Module):
    def __init__(self, dim, n_heads):
        super().__init__()
        self.n_heads = n_heads
        self.scale = (dim // n_heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, pad=None):
        b, n, d = x.shape
        h = self.n_heads
        q, k, v = self.qkv(x).reshape(b, n, 3, h, d // h).permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-2, -1)) * self.scale
        if pad is not None:
            # Rows with no real token at all would softmax over nothing; leave them unmasked.
            pad = pad & ~pad.all(dim=1, keepdim=True)
            att = att.masked_fill(pad[:, None, None, :], float("-inf"))
        att = att.softmax(dim=-1)
        return self.proj((att @ v).transpose(1, 2).reshape(b, n, d))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim, n_heads, mlp_ratio, drop_path):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = _mlp(dim, int(dim * mlp_ratio), dim)
        self.drop_path = DropPath(drop_path)

    def forward(self, x, pad=None):
        x = x + self.drop_path(self.attn(self.norm1(x), pad))
        return x + self.drop_path(self.mlp(self.norm2(x)))


class TransformerStack(nn.Module):
    def __init__(self, dim, depth, n_heads, mlp_ratio, drop_path):
        super().__init__()
        rates = np.linspace(0.0, drop_path, depth) if depth > 1 else [drop_path]
        self.blocks = nn.ModuleList([Block(dim, n_heads, mlp_ratio, float(r)) for r in rates])
        self.norm = nn.LayerNorm(dim)

    def forward(self, x, pos, pad=None):
        for blk in self.blocks:
            x = blk(x + pos, pad)
        return self.norm(x)


class ProjectionHead(nn.Module):
    """Affine -> GELU -> affine map from student features to a teacher space."""

    def __init__(self, d_in, d_out, d_hidden=None):
        super().__init__()
        self.d_in = d_in
        self.d_out = d_out
        self.net = _mlp(d_in, d_hidden or d_in, d_out)

    def forward(self, x):
        return self.net(x)


def apply_head(head: ProjectionHead, features):
    if features.shape[-1] != head.d_in:
        raise ContractError(f"head expects {head.d_in}-dim input, got {features.shape[-1]}")
    return head(features)


@dataclass
class ForwardOutput:
    """Padded per-sample sequences produced by one forward pass.

    Decoder sequences hold the visible tokens first, then the masked ones.
    ``token_patch[b, j]`` is the patch index behind decoder position ``j``
    (-1 for padding).
    """

    encoded: torch.Tensor  # (B, Lv, D)
    enc_pad: torch.Tensor  # (B, Lv) bool, True = padding
    decoded: torch.Tensor  # (B, Ld, D)
    dec_pad: torch.Tensor
    token_patch: torch.Tensor  # (B, Ld) long
    n_visible: list
    n_masked: list
    pred: list  # per sample (n_masked, K, 3)
    scene_feat: torch.Tensor  # (B, D)


def _as_state(state, batch):
    state = np.asarray(state.cpu() if torch.is_tensor(state) else state)
    if state.ndim == 1:
        state = np.broadcast_to(state, (batch, state.shape[0]))
    return state


class SceneMAE(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = c = config
        self.patch_embed = PatchEmbed(c.embed_dim, c.tokenizer_hidden)
        self.enc_pos = PosEmbed(c.embed_dim, c.pos_hidden)
        self.encoder = TransformerStack(c.embed_dim, c.encoder_depth, c.n_heads, c.mlp_ratio, c.drop_path)
        self.mask_token = nn.Parameter(torch.zeros(c.embed_dim))
        self.dec_pos = PosEmbed(c.embed_dim, c.pos_hidden)
        self.decoder = TransformerStack(c.embed_dim, c.decoder_depth, c.n_heads, c.mlp_ratio, c.drop_path)
        self.reconstruct = nn.Linear(c.embed_dim, 3 * c.patch_size)
        self.scene_img_head = ProjectionHead(c.embed_dim, c.d_img)
        self.scene_txt_head = ProjectionHead(c.embed_dim, c.d_txt)
        self.obj_img_head = ProjectionHead(c.embed_dim, c.d_img)
        self.obj_txt_head = ProjectionHead(c.embed_dim, c.d_txt)
        self.apply(self._init_weights)
        nn.init.trunc_normal_(self.mask_token, std=0.02)

    ENCODER_PREFIXES = ("patch_embed.", "enc_pos.", "encoder.")

    @staticmethod
    def _init_weights(m):
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)

    # -- pieces ------------------------------------------------------------

    def embed_patches(self, local_coords):
        return self.patch_embed(local_coords)

    def pos_embed(self, centers):
        return self.enc_pos(centers)

    def encode(self, tokens, pos, pad=None):
        """Encoder over VISIBLE tokens only; shape preserved."""
        return self.encoder(tokens, pos, pad)

    def decode(self, encoded, enc_pad, mask_centers, n_masked, n_visible=None, vis_centers=None):
        """Pad encoded tokens with mask tokens and run the decoder.

        ``mask_centers`` is a list of (n_masked_b, 3) tensors; its lengths must
        match ``n_masked`` (the plan's MASKED counts).
        """
        b = encoded.shape[0]
        if n_visible is None:
            n_visible = [int(x) for x in (~enc_pad).sum(dim=1)]
        if len(mask_centers) != b or any(len(mc) != n for mc, n in zip(mask_centers, n_masked)):
            raise ContractError("mask token count does not match the plan's MASKED count")
        seqs, pos = [], []
        for i in range(b):
            nv, nm = n_visible[i], n_masked[i]
            seqs.append(torch.cat([encoded[i, :nv], self.mask_token.expand(nm, -1)], dim=0))
            pos.append(torch.cat([self.dec_pos(vis_centers[i]), self.dec_pos(mask_centers[i])], dim=0))
        lengths = [len(s) for s in seqs]
        x = pad_sequence(seqs, batch_first=True)
        p = pad_sequence(pos, batch_first=True)
        pad = torch.arange(x.shape[1])[None, :] >= torch.tensor(lengths)[:, None]
        return self.decoder(x, p, pad), pad

    def reconstruct_head(self, h_masked):
        """(n, D) -> (n, K, 3) center-relative coordinates."""
        return self.reconstruct(h_masked).reshape(-1, self.config.patch_size, 3)

    @staticmethod
    def scene_pool(encoded, enc_pad):
        """Mean over real (visible) encoded tokens."""
        keep = (~enc_pad).to(encoded.dtype)[..., None]
        return (encoded * keep).sum(dim=1) / keep.sum(dim=1).clamp_min(1.0)

    # -- full pass -----------------------------------------------------------

    def forward(self, local_coords, centers, state) -> ForwardOutput:
        """Run one masked pass.

        local_coords: (B, M, K, 3); centers: (B, M, 3); state: (B, M) of
        :class:`~scenemae.masking.PatchState` values (numpy or tensor).
        """
        b = local_coords.shape[0]
        state = _as_state(state, b)
        vis_idx = [torch.from_numpy(np.flatnonzero(s == PatchState.VISIBLE)) for s in state]
        msk_idx = [torch.from_numpy(np.flatnonzero(s == PatchState.MASKED)) for s in state]
        n_vis = [len(v) for v in vis_idx]
        n_msk = [len(m) for m in msk_idx]

        vis_local = torch.cat([local_coords[i, vis_idx[i]] for i in range(b)], dim=0)
        tokens = list(torch.split(self.embed_patches(vis_local), n_vis))
        vis_centers = [centers[i, vis_idx[i]] for i in range(b)]
        pos = [self.pos_embed(c) for c in vis_centers]
        tok = pad_sequence(tokens, batch_first=True)
        pos_p = pad_sequence(pos, batch_first=True)
        enc_pad = torch.arange(tok.shape[1])[None, :] >= torch.tensor(n_vis)[:, None]
        encoded = self.encode(tok, pos_p, enc_pad)

        mask_centers = [centers[i, msk_idx[i]] for i in range(b)]
        decoded, dec_pad = self.decode(encoded, enc_pad, mask_centers, n_msk, n_vis, vis_centers)

        token_patch = torch.full(dec_pad.shape, -1, dtype=torch.long)
        pred = []
        for i in range(b):
            order = torch.cat([vis_idx[i], msk_idx[i]])
            token_patch[i, : len(order)] = order
            pred.append(self.reconstruct_head(decoded[i, n_vis[i]: n_vis[i] + n_msk[i]]))
        return ForwardOutput(
            encoded=encoded, enc_pad=enc_pad, decoded=decoded, dec_pad=dec_pad, token_patch=token_patch,
            n_visible=n_vis, n_masked=n_msk, pred=pred, scene_feat=self.scene_pool(encoded, enc_pad),
        )

    @torch.no_grad()
    def encode_all(self, local_coords, centers):
        """Encoder features for every patch (nothing masked or dropped), shape (B, M, D)."""
        tokens = self.embed_patches(local_coords)
        return self.encode(tokens, self.pos_embed(centers))

    def encoder_state_dict(self) -> dict:
        return {k: v for k, v in self.state_dict().items() if k.startswith(self.ENCODER_PREFIXES)}


class EncoderOnly(nn.Module):
    """Frozen-encoder view used for probing exported checkpoints."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = c = config
        self.patch_embed = PatchEmbed(c.embed_dim, c.tokenizer_hidden)
        self.enc_pos = PosEmbed(c.embed_dim, c.pos_hidden)
        self.encoder = TransformerStack(c.embed_dim, c.encoder_depth, c.n_heads, c.mlp_ratio, c.drop_path)

    @torch.no_grad()
    def encode_all(self, local_coords, centers):
        tokens = self.patch_embed(local_coords)
        return self.encoder(tokens, self.enc_pos(centers))
