"""
The completion network and its two critics.

Tensors are batched as (B, n, 3) for clouds and (B, w) for global features.
Parameter names are the module paths of CompletionNetwork and Critics, which
is what checkpoints store. Disabled ablation stages own no parameters.

    X -> encode -> f_coarse -> revise_feature -> f_fine
      -> coarse_decode -> Y_coarse -> revise_points -> Y_fine
      -> detail_decode(Y_fine, f_fine) -> Y_detail
"""

import logging
from dataclasses import dataclass

import torch
from config import ConfigError, ModelConfig, PointCountOutOfRange
from errors import EmptyInput, InputError, NonFiniteGradient
from torch import nn

logger = logging.getLogger(__name__)

LEAK = 0.2
MEMORY_STD = 0.02
FOLD_EXTENT = 0.05


def _zero(linear: nn.Linear) -> nn.Linear:
    nn.init.zeros_(linear.weight)
    nn.init.zeros_(linear.bias)
    return linear


def as_batch(points: torch.Tensor) -> torch.Tensor:
    """Accept (n, 3) or (B, n, 3); reject empty clouds"""
    if points.dim() == 2:
        points = points.unsqueeze(0)
    if points.dim() != 3 or points.shape[-1] != 3:
        raise InputError(f"expected points of shape (B, n, 3), got {tuple(points.shape)}")
    if points.shape[1] == 0:
        raise EmptyInput("cannot encode an empty cloud")
    return points


class OffsetAttention(nn.Module):
    """Self-attention whose output refines the offset F - attended(F).

    Attention weights are softmax-normalized over keys and then
    L1-normalized over queries; LBR is Linear + ReLU.
    """

    def __init__(self, width: int):
        super().__init__()
        inner = max(1, width // 4)
        self.query = nn.Linear(width, inner, bias=False)
        self.key = nn.Linear(width, inner, bias=False)
        self.value = nn.Linear(width, width)
        self.transform = nn.Linear(width, width)

    def attention(self, features: torch.Tensor) -> torch.Tensor:
        energy = self.query(features) @ self.key(features).transpose(-1, -2)
        weights = torch.softmax(energy, dim=-1)
        return weights / weights.sum(dim=-2, keepdim=True).clamp_min(1e-9)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        weights = self.attention(features)
        # row j gathers sum_i A[i, j] V[i]
        attended = weights.transpose(-1, -2) @ self.value(features)
        return features + torch.relu(self.transform(features - attended))


class ExternalAttention(nn.Module):
    """Multi-head external attention against two learned memories.

    Per head: A = softmax over points of F_h M_k^T, L1-normalized over the
    memory slots, out_h = A M_v. Heads are concatenated, projected and added
    back onto the input.
    """

    def __init__(self, width: int, heads: int, memory: int):
        super().__init__()
        if width % heads:
            raise ConfigError(f"width {width} is not divisible by {heads} heads")
        self.heads = heads
        self.head_width = width // heads
        self.project_in = nn.Linear(width, width)
        self.memory_key = nn.Parameter(torch.randn(memory, self.head_width) * MEMORY_STD)
        self.memory_value = nn.Parameter(torch.randn(memory, self.head_width) * MEMORY_STD)
        self.project_out = nn.Linear(width, width)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        batch, n, width = features.shape
        x = self.project_in(features).view(batch, n, self.heads, self.head_width)
        x = x.transpose(1, 2)  # (B, heads, n, d_h)
        weights = torch.softmax(x @ self.memory_key.T, dim=-2)
        weights = weights / weights.sum(dim=-1, keepdim=True).clamp_min(1e-9)
        out = (weights @ self.memory_value).transpose(1, 2).reshape(batch, n, width)
        return features + self.project_out(out)


class CascadedExternalAttention(nn.Module):
    def __init__(self, width: int, heads: int, memory: int, depth: int = 2):
        super().__init__()
        self.blocks = nn.ModuleList(
            [ExternalAttention(width, heads, memory) for _ in range(depth)]
        )

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            features = block(features)
        return features


@dataclass
class BranchActivations:
    point_features: torch.Tensor  # F11, (B, n, w/2)
    pooled_first: torch.Tensor  # f11
    expanded: torch.Tensor  # F11 with f11 appended to each row, (B, n, w)
    pooled_second: torch.Tensor  # f12
    output: torch.Tensor  # concat(f11, f12), (B, w)


class EncoderBranch(nn.Module):
    """Two stacked shared-MLP + max-pool stages.

    With ``attention`` on, offset attention follows the first MLP and a
    cascaded external attention sits between the two second-stage MLPs.
    """

    def __init__(self, width: int, attention: bool = False, heads: int = 4, memory: int = 64):
        super().__init__()
        half = width // 2
        self.width = width
        self.first = nn.Sequential(nn.Linear(3, half), nn.ReLU(), nn.Linear(half, half))
        self.second_in = nn.Linear(width, width)
        self.second_out = nn.Linear(width, half)
        self.offset_attention = OffsetAttention(half) if attention else None
        self.cascade = CascadedExternalAttention(width, heads, memory) if attention else None

    def activations(self, points: torch.Tensor) -> BranchActivations:
        points = as_batch(points)
        features = self.first(points)
        if self.offset_attention is not None:
            features = self.offset_attention(features)
        pooled_first = features.max(dim=1).values
        expanded = torch.cat(
            [features, pooled_first.unsqueeze(1).expand(-1, features.shape[1], -1)], dim=-1
        )
        hidden = torch.relu(self.second_in(expanded))
        if self.cascade is not None:
            hidden = self.cascade(hidden)
        pooled_second = self.second_out(hidden).max(dim=1).values
        output = torch.cat([pooled_first, pooled_second], dim=-1)
        return BranchActivations(features, pooled_first, expanded, pooled_second, output)

    def forward(self, points: torch.Tensor) -> torch.Tensor:
        return self.activations(points).output


@dataclass
class EncoderActivations:
    extensive: BranchActivations | None
    salient: BranchActivations | None
    f_coarse: torch.Tensor


class Encoder(nn.Module):
    """Dual-branch encoder; a lone branch is linearly projected to d1 + d2"""

    def __init__(self, config: ModelConfig):
        super().__init__()
        if not (config.extensive_branch or config.salient_branch):
            raise ConfigError("at least one encoder branch must be enabled")
        self.extensive = EncoderBranch(config.d1) if config.extensive_branch else None
        self.salient = (
            EncoderBranch(config.d2, config.salient_attention, config.heads, config.memory)
            if config.salient_branch
            else None
        )
        self.projection = None
        if self.extensive is None or self.salient is None:
            lone = config.d1 if self.extensive is not None else config.d2
            self.projection = nn.Linear(lone, config.feature_width)

    def activations(self, points: torch.Tensor) -> EncoderActivations:
        points = as_batch(points)
        extensive = self.extensive.activations(points) if self.extensive is not None else None
        salient = self.salient.activations(points) if self.salient is not None else None
        parts = [a.output for a in (extensive, salient) if a is not None]
        f_coarse = parts[0] if len(parts) == 1 else torch.cat(parts, dim=-1)
        if self.projection is not None:
            f_coarse = self.projection(f_coarse)
        return EncoderActivations(extensive, salient, f_coarse)

    def forward(self, points: torch.Tensor) -> torch.Tensor:
        return self.activations(points).f_coarse


class FeatureReviser(nn.Module):
    """Seven FC layers; the input is concatenated back in before layers 3 and 5.

    The last layer starts at zero, so f_fine = f_coarse until trained.
    """

    def __init__(self, width: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or width
        self.layers = nn.ModuleList(
            [
                nn.Linear(width, hidden),
                nn.Linear(hidden, hidden),
                nn.Linear(hidden + width, hidden),
                nn.Linear(hidden, hidden),
                nn.Linear(hidden + width, hidden),
                nn.Linear(hidden, hidden),
                _zero(nn.Linear(hidden, width)),
            ]
        )

    def forward(self, feature: torch.Tensor) -> torch.Tensor:
        x = feature
        for i, layer in enumerate(self.layers):
            if i in (2, 4):
                x = torch.cat([x, feature], dim=-1)
            x = layer(x)
            if i < len(self.layers) - 1:
                x = nn.functional.leaky_relu(x, LEAK)
        return feature + x


class CoarseDecoder(nn.Module):
    def __init__(self, width: int, hidden: int, n_coarse: int):
        super().__init__()
        self.n_coarse = n_coarse
        self.mlp = nn.Sequential(
            nn.Linear(width, hidden),
            nn.ReLU(),
            nn.Linear(hidden, hidden),
            nn.ReLU(),
            nn.Linear(hidden, 3 * n_coarse),
        )

    def forward(self, feature: torch.Tensor) -> torch.Tensor:
        return self.mlp(feature).view(feature.shape[0], self.n_coarse, 3)


class PointReviser(nn.Module):
    """Shared per-point three-layer MLP producing residual offsets"""

    def __init__(self, hidden: int):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(3, hidden),
            nn.LeakyReLU(LEAK),
            nn.Linear(hidden, hidden),
            nn.LeakyReLU(LEAK),
            _zero(nn.Linear(hidden, 3)),
        )

    def forward(self, points: torch.Tensor) -> torch.Tensor:
        return points + self.mlp(points)


def ball_query(points: torch.Tensor, radius: float, k: int) -> torch.Tensor:
    """(B, n, k) indices of up to k points within radius of each point.

    Members are taken in ascending index order; short groups repeat their
    first member. Every point lies in its own ball, so no group is empty.
    """
    batch, n, _ = points.shape
    diff = points.unsqueeze(2) - points.unsqueeze(1)
    inside = (diff * diff).sum(dim=-1) <= radius * radius
    index = torch.arange(n, device=points.device).expand(batch, n, n)
    index = torch.where(inside, index, torch.full_like(index, n))
    index = index.sort(dim=-1).values[:, :, : min(k, n)]
    first = index[:, :, :1].expand_as(index)
    index = torch.where(index == n, first, index)
    if k > n:
        index = torch.cat([index, index[:, :, :1].expand(batch, n, k - n)], dim=-1)
    return index


def folding_grid(grid: int) -> torch.Tensor:
    """(g*g, 2) patch coordinates in [-0.05, 0.05]^2; the origin when g = 1"""
    if grid == 1:
        return torch.zeros(1, 2)
    side = torch.linspace(-FOLD_EXTENT, FOLD_EXTENT, grid)
    u, v = torch.meshgrid(side, side, indexing="ij")
    return torch.stack([u.reshape(-1), v.reshape(-1)], dim=-1)


class DetailDecoder(nn.Module):
    """Local grouping, fusion with f_fine, external attention, then two-stage folding"""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.radius = config.ball_radius
        self.k = config.ball_k
        self.grid = config.grid
        width = config.fold_width
        fused_in = config.feature_width + 3

        self.local = None
        if config.pointnetpp_fusion:
            self.local = nn.Sequential(
                nn.Linear(3, config.local_width),
                nn.ReLU(),
                nn.Linear(config.local_width, config.local_width),
            )
            fused_in += config.local_width
        self.fuse = nn.Linear(fused_in, width)
        self.attention = (
            ExternalAttention(width, config.heads, config.memory)
            if config.transformer_fusion
            else None
        )
        self.fold_first = nn.Sequential(
            nn.Linear(width + 5, width),
            nn.ReLU(),
            nn.Linear(width, width),
            nn.ReLU(),
            nn.Linear(width, 3),
        )
        self.fold_second = nn.Sequential(
            nn.Linear(width + 3, width),
            nn.ReLU(),
            nn.Linear(width, width),
            nn.ReLU(),
            _zero(nn.Linear(width, 3)),
        )
        self.register_buffer("seeds", folding_grid(config.grid), persistent=False)

    def local_features(self, points: torch.Tensor) -> torch.Tensor:
        index = ball_query(points, self.radius, self.k)
        batch = torch.arange(points.shape[0], device=points.device).view(-1, 1, 1)
        grouped = points[batch, index] - points.unsqueeze(2)
        return self.local(grouped).max(dim=2).values

    def point_features(self, points: torch.Tensor, feature: torch.Tensor) -> torch.Tensor:
        n = points.shape[1]
        parts = [feature.unsqueeze(1).expand(-1, n, -1), points]
        if self.local is not None:
            parts.insert(0, self.local_features(points))
        fused = torch.relu(self.fuse(torch.cat(parts, dim=-1)))
        if self.attention is not None:
            fused = self.attention(fused)
        return fused

    def forward(self, points: torch.Tensor, feature: torch.Tensor) -> torch.Tensor:
        batch, n, _ = points.shape
        patch = self.seeds.shape[0]
        fused = self.point_features(points, feature)
        fused = fused.unsqueeze(2).expand(-1, -1, patch, -1)
        centres = points.unsqueeze(2).expand(-1, -1, patch, -1)
        seeds = self.seeds.to(points.dtype).expand(batch, n, -1, -1)
        folded = self.fold_first(torch.cat([fused, seeds, centres], dim=-1))
        offsets = self.fold_second(torch.cat([fused, folded], dim=-1))
        return (centres + offsets).reshape(batch, n * patch, 3)


@dataclass
class ForwardTrace:
    encoder: EncoderActivations
    f_coarse: torch.Tensor
    f_fine: torch.Tensor
    Y_coarse: torch.Tensor
    Y_fine: torch.Tensor
    Y_detail: torch.Tensor


class CompletionNetwork(nn.Module):
    """Encoder, revision stages and decoders; the generator side of training"""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        width = config.feature_width
        self.encoder = Encoder(config)
        self.feature_reviser = FeatureReviser(width) if config.feature_revision else None
        self.coarse_decoder = CoarseDecoder(width, config.decoder_hidden, config.n_coarse)
        self.point_reviser = PointReviser(config.point_hidden) if config.point_revision else None
        self.detail_decoder = DetailDecoder(config)

    def encode(self, points: torch.Tensor) -> torch.Tensor:
        return self.encoder(points)

    def revise_feature(self, feature: torch.Tensor) -> torch.Tensor:
        return feature if self.feature_reviser is None else self.feature_reviser(feature)

    def coarse_decode(self, feature: torch.Tensor) -> torch.Tensor:
        return self.coarse_decoder(feature)

    def revise_points(self, points: torch.Tensor) -> torch.Tensor:
        return points if self.point_reviser is None else self.point_reviser(points)

    def detail_decode(self, points: torch.Tensor, feature: torch.Tensor) -> torch.Tensor:
        return self.detail_decoder(points, feature)

    def check_input(self, points: torch.Tensor) -> torch.Tensor:
        points = as_batch(points)
        n = points.shape[1]
        if n < self.config.min_points or n > self.config.max_points:
            raise PointCountOutOfRange(
                f"input has {n} points; the model accepts "
                f"{self.config.min_points}..{self.config.max_points}"
            )
        return points

    def forward(self, points: torch.Tensor) -> ForwardTrace:
        points = self.check_input(points)
        activations = self.encoder.activations(points)
        f_fine = self.revise_feature(activations.f_coarse)
        Y_coarse = self.coarse_decode(f_fine)
        Y_fine = self.revise_points(Y_coarse)
        Y_detail = self.detail_decode(Y_fine, f_fine)
        return ForwardTrace(activations, activations.f_coarse, f_fine, Y_coarse, Y_fine, Y_detail)


def complete(model: CompletionNetwork, points: torch.Tensor) -> ForwardTrace:
    """Full forward pass recording every intermediate"""
    return model(points)


class ChannelGate(nn.Module):
    """Squeeze-and-excitation style sigmoid gate over feature channels"""

    def __init__(self, width: int, reduction: int = 4):
        super().__init__()
        inner = max(1, width // reduction)
        self.squeeze = nn.Linear(width, inner)
        self.excite = nn.Linear(inner, width)

    def forward(self, feature: torch.Tensor) -> torch.Tensor:
        gate = torch.sigmoid(self.excite(torch.relu(self.squeeze(feature))))
        return feature * gate


class FeatureCritic(nn.Module):
    def __init__(self, width: int, hidden: int):
        super().__init__()
        self.gate = ChannelGate(width)
        self.layers = nn.Sequential(
            nn.Linear(width, hidden),
            nn.LeakyReLU(LEAK),
            nn.Linear(hidden, hidden),
            nn.LeakyReLU(LEAK),
            nn.Linear(hidden, hidden),
            nn.LeakyReLU(LEAK),
            nn.Linear(hidden, 1),
        )

    def forward(self, feature: torch.Tensor) -> torch.Tensor:
        return self.layers(self.gate(feature)).squeeze(-1)


class PointCritic(nn.Module):
    """Shared per-point MLP, max-pool, two FC layers; order-invariant"""

    def __init__(self, hidden: int):
        super().__init__()
        self.shared = nn.Sequential(
            nn.Linear(3, 64),
            nn.LeakyReLU(LEAK),
            nn.Linear(64, 128),
        )
        self.head = nn.Sequential(nn.Linear(128, hidden), nn.LeakyReLU(LEAK), nn.Linear(hidden, 1))

    def forward(self, points: torch.Tensor) -> torch.Tensor:
        pooled = self.shared(as_batch(points)).max(dim=1).values
        return self.head(pooled).squeeze(-1)


class Critics(nn.Module):
    """Critics for the enabled revision stages"""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.feature = (
            FeatureCritic(config.feature_width, config.critic_width)
            if config.feature_revision
            else None
        )
        self.point = PointCritic(config.critic_width) if config.point_revision else None

    def get(self, kind: str) -> nn.Module:
        if kind not in ("feature", "point"):
            raise ValueError(f"Unknown critic kind: {kind}")
        critic = getattr(self, kind)
        if critic is None:
            raise ConfigError(f"the {kind} revision stage is disabled, so it has no critic")
        return critic


def critic_forward(critics: Critics, kind: str, inputs: torch.Tensor) -> torch.Tensor:
    """One score per batch member"""
    return critics.get(kind)(inputs)


def build_model(config: ModelConfig, seed: int = 0) -> tuple[CompletionNetwork, Critics]:
    """Freshly initialized network and critics, deterministic in the seed"""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = CompletionNetwork(config)
        critics = Critics(config)
    logger.debug(
        f"Built model with {parameter_count(model)} generator and "
        f"{parameter_count(critics)} critic parameters"
    )
    return model, critics


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def check_gradients(module: nn.Module, prefix: str = ""):
    """Raise NonFiniteGradient naming the first parameter with a NaN/inf gradient"""
    for name, param in module.named_parameters():
        if param.grad is not None and not torch.isfinite(param.grad).all():
            raise NonFiniteGradient(prefix + name)


def backward(
    outputs: torch.Tensor,
    upstream: torch.Tensor,
    params: dict[str, torch.Tensor],
    retain_graph: bool = False,
) -> dict[str, torch.Tensor]:
    """Vector-Jacobian product of ``outputs`` against every named tensor.

    Tensors the outputs do not depend on get zero gradients.
    """
    names = list(params)
    grads = torch.autograd.grad(
        outputs,
        [params[name] for name in names],
        grad_outputs=upstream,
        retain_graph=retain_graph,
        allow_unused=True,
    )
    result = {}
    for name, grad in zip(names, grads, strict=True):
        if grad is None:
            grad = torch.zeros_like(params[name])
        if not torch.isfinite(grad).all():
            raise NonFiniteGradient(name)
        result[name] = grad
    return result

