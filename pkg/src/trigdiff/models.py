"""Noise-prediction networks for 16-32 px desk-scale experiments.

Both variants are small UNets with one downsampling level. The conditional
variant concatenates the masked image and mask as extra input channels and
adds a learned text embedding (small fixed vocabulary, index 0 = the empty
string) to the timestep embedding.
"""

from __future__ import annotations

import math

import torch
from torch import nn


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Transformer-style sinusoidal embedding of integer timesteps."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0)
        * torch.arange(half, dtype=torch.float32, device=t.device)
        / max(half - 1, 1)
    ).to(t.dtype if t.is_floating_point() else torch.float32)
    args = t.float()[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int):
        super().__init__()
        groups = math.gcd(8, c_in)
        self.norm1 = nn.GroupNorm(groups, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, c_out)
        self.norm2 = nn.GroupNorm(math.gcd(8, c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(nn.functional.silu(self.norm1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        h = self.conv2(nn.functional.silu(self.norm2(h)))
        return h + self.skip(x)


class EpsilonUNet(nn.Module):
    """Small UNet predicting the noise added at step t.

    Unconditional call: ``model(x_t, t)``.
    Conditional call:  ``model(x_t, t, masked_image, mask, text)`` where
    ``text`` is a (B, L) long tensor over the caption vocabulary (0 = null
    token / empty string) or ``None`` for the empty string.
    """

    def __init__(
        self,
        channels: int = 3,
        base_width: int = 32,
        time_dim: int = 64,
        conditional: bool = False,
        vocab_size: int = 0,
    ):
        super().__init__()
        if conditional and vocab_size < 1:
            raise ValueError("conditional model needs vocab_size >= 1")
        self.channels = channels
        self.base_width = base_width
        self.time_dim = time_dim
        self.conditional = conditional
        self.vocab_size = vocab_size

        w = base_width
        in_ch = channels + (channels + 1 if conditional else 0)
        self.time_mlp = nn.Sequential(
            nn.Linear(time_dim, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim)
        )
        if conditional:
            self.text_embed = nn.Embedding(vocab_size, time_dim)
        self.stem = nn.Conv2d(in_ch, w, 3, padding=1)
        self.enc = ResBlock(w, w, time_dim)
        self.down = nn.Conv2d(w, w, 3, stride=2, padding=1)
        self.mid1 = ResBlock(w, 2 * w, time_dim)
        self.mid2 = ResBlock(2 * w, 2 * w, time_dim)
        self.up = nn.ConvTranspose2d(2 * w, w, 4, stride=2, padding=1)
        self.dec = ResBlock(2 * w, w, time_dim)
        self.out_norm = nn.GroupNorm(math.gcd(8, w), w)
        self.out_conv = nn.Conv2d(w, channels, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def _text_vector(self, text, batch: int, device) -> torch.Tensor:
        if text is None:
            text = torch.zeros(batch, 1, dtype=torch.long, device=device)
        if text.ndim == 1:
            text = text[None, :].expand(batch, -1)
        return self.text_embed(text).mean(dim=1)

    def forward(self, x_t, t, masked_image=None, mask=None, text=None):
        squeeze = x_t.ndim == 3
        if squeeze:
            x_t = x_t[None]
        b = x_t.shape[0]
        if not torch.is_tensor(t):
            t = torch.tensor(t, device=x_t.device)
        if t.ndim == 0:
            t = t.expand(b)
        temb = self.time_mlp(timestep_embedding(t, self.time_dim).to(x_t.dtype))

        if self.conditional:
            if masked_image is None or mask is None:
                raise ValueError("conditional model requires masked_image and mask")
            if masked_image.ndim == 3:
                masked_image = masked_image[None]
            if mask.ndim == 2:
                mask = mask[None, None]
            elif mask.ndim == 3:
                mask = mask[:, None]
            masked_image = masked_image.expand(b, -1, -1, -1)
            mask = mask.expand(b, -1, -1, -1).to(x_t.dtype)
            temb = temb + self._text_vector(text, b, x_t.device).to(x_t.dtype)
            h = torch.cat([x_t, masked_image, mask], dim=1)
        else:
            if masked_image is not None or mask is not None or text is not None:
                raise ValueError("unconditional model takes no conditioning inputs")
            h = x_t

        h = self.stem(h)
        e = self.enc(h, temb)
        d = self.down(e)
        d = self.mid2(self.mid1(d, temb), temb)
        u = self.up(d)
        u = self.dec(torch.cat([u, e], dim=1), temb)
        out = self.out_conv(nn.functional.silu(self.out_norm(u)))
        return out[0] if squeeze else out


def build_model(
    channels: int,
    base_width: int,
    time_dim: int,
    seed: int,
    conditional: bool = False,
    vocab_size: int = 0,
    dtype: torch.dtype = torch.float32,
) -> EpsilonUNet:
    """Deterministically initialized model (same seed -> same weights)."""
    torch.manual_seed(seed)
    model = EpsilonUNet(
        channels=channels,
        base_width=base_width,
        time_dim=time_dim,
        conditional=conditional,
        vocab_size=vocab_size,
    )
    return model.to(dtype)
