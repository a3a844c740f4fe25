"""Residual generators, site embedding and patch discriminators."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn


@dataclass
class GeneratorSpec:
    image_size: int = 64
    base_channels: int = 32
    n_down: int = 2
    n_res: int = 4
    in_channels: int = 1
    embed_dim: int = 16
    embed_hidden: int = 8

    def __post_init__(self):
        if self.image_size % (2 ** self.n_down):
            raise ValueError(f"image size {self.image_size} not divisible by 2**{self.n_down}")
        if self.image_size // (2 ** self.n_down) < 1:
            raise ValueError("too many downsampling stages for the image size")

    @property
    def latent_size(self) -> int:
        return self.image_size // (2 ** self.n_down)

    @property
    def latent_channels(self) -> int:
        return self.base_channels * 2 ** self.n_down

    def to_dict(self):
        return asdict(self)


@dataclass
class DiscriminatorSpec:
    base_channels: int = 64
    n_layers: int = 3
    slope: float = 0.2
    in_channels: int = 1

    def to_dict(self):
        return asdict(self)


class ResidualBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(channels, channels, 3), nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1), nn.Conv2d(channels, channels, 3), nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.body(x)


class SiteEmbedding(nn.Module):
    """Learnable per-site vector upsampled by transposed convolutions to one latent channel.

    The vector is first expanded to a small square seed (at most 4x4), then
    doubled with stride-2 transposed convolutions until it reaches the latent
    resolution.
    """

    def __init__(self, n_sites: int, latent_size: int, dim: int = 16, hidden: int = 8):
        super().__init__()
        self.n_sites = n_sites
        self.latent_size = latent_size
        seed = latent_size
        n_up = 0
        while seed > 4 and seed % 2 == 0:
            seed //= 2
            n_up += 1
        self.table = nn.Embedding(n_sites, dim)
        layers: list[nn.Module] = [nn.ConvTranspose2d(dim, hidden, kernel_size=seed)]
        for _ in range(n_up):
            layers += [nn.ReLU(inplace=True), nn.ConvTranspose2d(hidden, hidden, 4, stride=2, padding=1)]
        layers += [nn.ReLU(inplace=True), nn.ConvTranspose2d(hidden, 1, kernel_size=1)]
        self.up = nn.Sequential(*layers)

    def forward(self, site_index: torch.Tensor) -> torch.Tensor:
        e = self.table(site_index)
        return self.up(e[:, :, None, None])


class Generator(nn.Module):
    """Encoder, residual transformation blocks, decoder; tanh output.

    With ``n_sites`` set, a site-embedding channel is appended to the encoder
    output before the residual blocks.
    """

    def __init__(self, spec: GeneratorSpec, n_sites: int | None = None):
        super().__init__()
        self.spec = spec
        self.n_sites = n_sites
        c = spec.base_channels
        enc: list[nn.Module] = [nn.ReflectionPad2d(3), nn.Conv2d(spec.in_channels, c, 7),
                                nn.InstanceNorm2d(c), nn.ReLU(inplace=True)]
        for i in range(spec.n_down):
            cin, cout = c * 2 ** i, c * 2 ** (i + 1)
            enc += [nn.Conv2d(cin, cout, 3, stride=2, padding=1), nn.InstanceNorm2d(cout), nn.ReLU(inplace=True)]
        self.encoder = nn.Sequential(*enc)

        latent = spec.latent_channels + (1 if n_sites else 0)
        self.embedding = SiteEmbedding(n_sites, spec.latent_size, spec.embed_dim, spec.embed_hidden) if n_sites else None
        self.transform = nn.Sequential(*[ResidualBlock(latent) for _ in range(spec.n_res)])

        dec: list[nn.Module] = []
        cin = latent
        for i in reversed(range(spec.n_down)):
            cout = c * 2 ** i
            dec += [nn.ConvTranspose2d(cin, cout, 3, stride=2, padding=1, output_padding=1),
                    nn.InstanceNorm2d(cout), nn.ReLU(inplace=True)]
            cin = cout
        self.decoder = nn.Sequential(*dec)
        self.head = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(c, spec.in_channels, 7))

    def zero_output_layer(self):
        nn.init.zeros_(self.head[1].weight)
        nn.init.zeros_(self.head[1].bias)

    def forward(self, x: torch.Tensor, site_index: torch.Tensor | None = None) -> torch.Tensor:
        h = self.encoder(x)
        if self.embedding is not None:
            if site_index is None:
                raise ValueError("conditional generator needs a site index")
            s = self.embedding(site_index)
            h = torch.cat([h, s.expand(h.shape[0], -1, -1, -1)], dim=1)
        elif site_index is not None:
            raise ValueError("unconditional generator takes no site index")
        h = self.transform(h)
        return torch.tanh(self.head(self.decoder(h)))


class PatchDiscriminator(nn.Module):
    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        c = spec.base_channels
        layers: list[nn.Module] = [nn.Conv2d(spec.in_channels, c, 4, stride=2, padding=1),
                                   nn.LeakyReLU(spec.slope, inplace=True)]
        for i in range(1, spec.n_layers):
            cin, cout = c * 2 ** (i - 1), c * 2 ** i
            layers += [nn.Conv2d(cin, cout, 4, stride=2, padding=1), nn.InstanceNorm2d(cout),
                       nn.LeakyReLU(spec.slope, inplace=True)]
        layers.append(nn.Conv2d(c * 2 ** (spec.n_layers - 1), 1, 4, stride=1, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


def init_weights(module: nn.Module, std: float = 0.02):
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class HarmonizerModel(nn.Module):
    """Forward generator G (source -> reference), site-conditioned reverse generator F,
    a reference discriminator and one discriminator per source site."""

    def __init__(self, site_names, reference_name: str = "reference",
                 gen_spec: GeneratorSpec | None = None, disc_spec: DiscriminatorSpec | None = None):
        super().__init__()
        self.site_names = list(site_names)
        if not self.site_names:
            raise ValueError("need at least one source site")
        self.reference_name = reference_name
        self.gen_spec = gen_spec or GeneratorSpec()
        self.disc_spec = disc_spec or DiscriminatorSpec()
        self.G = Generator(self.gen_spec)
        self.F = Generator(self.gen_spec, n_sites=self.K)
        self.D_ref = PatchDiscriminator(self.disc_spec)
        self.D_src = nn.ModuleList([PatchDiscriminator(self.disc_spec) for _ in self.site_names])

    @property
    def K(self) -> int:
        return len(self.site_names)

    def generator_parameters(self):
        return list(self.G.parameters()) + list(self.F.parameters())

    def discriminator_parameters(self):
        return list(self.D_ref.parameters()) + list(self.D_src.parameters())
