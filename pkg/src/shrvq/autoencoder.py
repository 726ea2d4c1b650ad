"""Convolutional frame encoder/decoder and the quantizer-aware losses.

Frames and latents use channels-last layout at the API ((H, W, C) /
(H, W, D), optionally with a leading batch axis); the convolutions run
NCHW internally. Squared-norm loss terms are per-element means.
"""

from dataclasses import dataclass, field

import torch
from torch import nn
from torch.nn import functional as F


@dataclass
class AutoencoderConfig:
    """Architecture descriptor; serialized into checkpoints."""

    in_channels: int = 1
    hidden: int = 64
    num_downsample: int = 2
    latent_dim: int = 8
    num_res_blocks: int = 2
    seed: int = 0

    def scale_factor(self):
        return 2**self.num_downsample


class ResidualBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.net = nn.Sequential(
            nn.ReLU(),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(channels, channels, 1),
        )

    def forward(self, x):
        return x + self.net(x)


class FrameAutoencoder(nn.Module):
    """Strided-conv encoder and mirrored transposed-conv decoder.

    Each downsample step halves the spatial size, so a 128x128 frame with
    two steps lands on a 32x32 latent grid. The decoder output is squashed
    to [0, 1] with a sigmoid.
    """

    def __init__(self, config: AutoencoderConfig):
        super().__init__()
        self.config = config
        c = config
        with torch.random.fork_rng():
            torch.manual_seed(c.seed)
            enc = []
            ch_in = c.in_channels
            for i in range(c.num_downsample):
                ch_out = c.hidden // 2 if i == 0 and c.num_downsample > 1 else c.hidden
                enc += [nn.Conv2d(ch_in, ch_out, 4, stride=2, padding=1), nn.ReLU()]
                ch_in = ch_out
            enc += [nn.Conv2d(ch_in, c.hidden, 3, padding=1)]
            enc += [ResidualBlock(c.hidden) for _ in range(c.num_res_blocks)]
            enc += [nn.Conv2d(c.hidden, c.latent_dim, 1)]
            self.encoder = nn.Sequential(*enc)

            dec = [nn.Conv2d(c.latent_dim, c.hidden, 3, padding=1)]
            dec += [ResidualBlock(c.hidden) for _ in range(c.num_res_blocks)]
            ch_in = c.hidden
            for i in range(c.num_downsample):
                last = i == c.num_downsample - 1
                ch_out = c.in_channels if last else c.hidden // 2
                dec += [nn.ConvTranspose2d(ch_in, ch_out, 4, stride=2, padding=1)]
                if not last:
                    dec += [nn.ReLU()]
                ch_in = ch_out
            self.decoder = nn.Sequential(*dec)

    def _to_nchw(self, x, channels, kind):
        dtype = next(self.parameters()).dtype
        x = torch.as_tensor(x) if not torch.is_tensor(x) else x
        x = x.to(dtype)
        if x.ndim == 3:
            x = x.unsqueeze(0)
            squeeze = True
        elif x.ndim == 4:
            squeeze = False
        else:
            raise ValueError(f"{kind} must be (H, W, C) or (B, H, W, C), got {tuple(x.shape)}")
        if x.shape[-1] != channels:
            raise ValueError(f"{kind} has {x.shape[-1]} channels, expected {channels}")
        return x.permute(0, 3, 1, 2), squeeze

    def encode(self, x):
        """Frame(s) in [0,1] -> continuous latent grid(s)."""
        x, squeeze = self._to_nchw(x, self.config.in_channels, "frame")
        if x.shape[-2] % self.config.scale_factor() or x.shape[-1] % self.config.scale_factor():
            raise ValueError(
                f"frame size {tuple(x.shape[-2:])} not divisible by "
                f"{self.config.scale_factor()}"
            )
        z = self.encoder(x).permute(0, 2, 3, 1)
        return z.squeeze(0) if squeeze else z

    def decode(self, e):
        """Latent embedding grid(s) -> frame(s) in [0,1]."""
        e, squeeze = self._to_nchw(e, self.config.latent_dim, "embedding")
        y = torch.sigmoid(self.decoder(e)).permute(0, 2, 3, 1)
        return y.squeeze(0) if squeeze else y


def straight_through(z, e_c):
    """Quantized value forward, identity gradient to the encoder output.

    The result equals ``e_c`` bit-exactly; gradients of anything downstream
    pass unchanged to ``z`` and never reach ``e_c`` through this edge.
    """
    if z.shape != e_c.shape:
        raise ValueError(f"shape mismatch: {tuple(z.shape)} vs {tuple(e_c.shape)}")
    return e_c.detach() + (z - z.detach())


@dataclass
class LossBreakdown:
    """Total plus components of the quantizer training objective.

    ``codebook_terms[0]``/``commitment_terms[0]`` are the combined-embedding
    pair; entries 1..n are the per-layer pairs. All terms are per-element
    mean squared errors; commitment entries carry their beta weight.
    """

    total: torch.Tensor
    reconstruction: torch.Tensor
    codebook_terms: list = field(default_factory=list)
    commitment_terms: list = field(default_factory=list)


def hrvqvae_loss(x, x_hat, quant, betas):
    """Reconstruction plus hierarchical codebook/commitment terms.

    ``betas`` has n+1 entries: the combined-term weight followed by one per
    layer. Stop-gradients follow the standard pattern: codebook terms pull
    codewords toward detached residuals, commitment terms pull residuals
    toward detached codewords.
    """
    n = quant.num_layers
    if len(betas) != n + 1:
        raise ValueError(f"betas must have n+1={n + 1} entries, got {len(betas)}")
    if not torch.is_tensor(x):
        x = torch.as_tensor(x, dtype=torch.float32)
    if not torch.is_tensor(x_hat):
        x_hat = torch.as_tensor(x_hat, dtype=torch.float32)
    if x.shape != x_hat.shape:
        raise ValueError("x and x_hat shapes differ")

    recon = F.mse_loss(x_hat, x)
    z = quant.latent
    codebook_terms = [F.mse_loss(quant.combined, z.detach())]
    commitment_terms = [betas[0] * F.mse_loss(z, quant.combined.detach())]
    for i in range(n):
        prev = z if i == 0 else quant.residual_grids[i - 1]
        e = quant.codeword_grids[i]
        codebook_terms.append(F.mse_loss(e, prev.detach()))
        commitment_terms.append(betas[i + 1] * F.mse_loss(prev, e.detach()))
    total = recon
    for t in codebook_terms + commitment_terms:
        total = total + t
    return LossBreakdown(
        total=total,
        reconstruction=recon,
        codebook_terms=codebook_terms,
        commitment_terms=commitment_terms,
    )


def layer_reconstructions(autoencoder, quant):
    """Decoded prefix sums and per-layer delta heatmaps.

    For each prefix k in 1..n, decodes the sum of the first k codeword
    grids; the heatmap is |decode(prefix k) - decode(prefix k-1)| averaged
    over channels and normalized to [0, 1] (prefix 0 is the zero embedding).
    Returns a list of (frame, heatmap) pairs.
    """
    with torch.no_grad():
        prev = autoencoder.decode(torch.zeros_like(quant.combined))
        prefix = None
        out = []
        for e in quant.codeword_grids:
            prefix = e if prefix is None else prefix + e
            frame = autoencoder.decode(prefix)
            delta = (frame - prev).abs().mean(dim=-1)
            peak = delta.max()
            if peak > 0:
                delta = delta / peak
            out.append((frame, delta))
            prev = frame
    return out
