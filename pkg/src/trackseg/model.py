"""Siamese tracking/segmentation network.

The network compares a small exemplar patch against a larger search patch:
both run through a shared backbone, per-branch 1x1 "adjust" layers project
the features, and a depth-wise cross-correlation produces a grid of response
cells. Each cell carries classification score(s), optionally box-regression
offsets, and a flattened low-resolution mask; a refinement decoder can
upsample any cell's mask to exemplar resolution using skip connections into
the search-patch feature pyramid.

PyTorch provides the differentiable-array substrate; all shape contracts are
asserted eagerly so configuration errors fail at construction time.
"""

from __future__ import annotations

import dataclasses
import io
import json
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

CHECKPOINT_FORMAT_VERSION = 1

VARIANTS = ("two_branch", "three_branch")


@dataclass(frozen=True)
class ModelConfig:
    backbone_kind: str = "resnet50_c4"  # or "toy_convnet"
    feature_channels: int = 256
    anchors_per_cell: int = 5
    mask_side: int = 63
    refined_mask_side: int = 127
    refinement_channels: tuple[int, int, int] = (32, 16, 8)
    exemplar_side: int = 127
    search_side: int = 255
    response_side: int = 17
    total_stride: int = 8
    toy_channels: tuple[int, int, int, int] = (16, 32, 64, 64)
    input_mean: float = 117.0
    input_scale: float = 58.0

    def __post_init__(self):
        if self.backbone_kind not in ("resnet50_c4", "toy_convnet"):
            raise ValueError(f"unknown backbone {self.backbone_kind!r}")
        if (self.search_side - self.exemplar_side) % self.total_stride != 0:
            raise ValueError("total_stride must divide search_side - exemplar_side")
        z = feature_sides(self.exemplar_side)
        x = feature_sides(self.search_side)
        got = x.s8 - z.s8 + 1
        if got != self.response_side:
            raise ValueError(f"response_side {self.response_side} inconsistent with crop sides (got {got})")

    @property
    def exemplar_feat_side(self) -> int:
        return feature_sides(self.exemplar_side).s8

    @property
    def search_feat_side(self) -> int:
        return feature_sides(self.search_side).s8

    def cell_window(self, row: int, col: int) -> tuple[float, float, float, float]:
        """Candidate window of a response cell in search-patch coordinates.

        Returns (x_min, y_min, x_max, y_max); the window has exemplar size
        and slides with the total stride, so the center cell's window is
        centered in the search patch.
        """
        s = self.total_stride
        return (
            float(col * s),
            float(row * s),
            float(col * s + self.exemplar_side),
            float(row * s + self.exemplar_side),
        )

    def cell_centers(self) -> np.ndarray:
        """(g, g, 2) array of window centers (x, y) in search coordinates."""
        g = self.response_side
        offs = np.arange(g) * self.total_stride + self.exemplar_side / 2.0
        cx, cy = np.meshgrid(offs, offs)
        return np.stack([cx, cy], axis=-1)


@dataclass(frozen=True)
class FeatureSides:
    s2: int  # after the stride-2 stem
    s4: int  # after the stride-4 stage
    s8: int  # after the stride-8 stage (and all later unit-stride stages)


def feature_sides(input_side: int) -> FeatureSides:
    """Spatial side at each stage for a given square input side.

    The stem is a 7x7/2 convolution without padding, the stride-4 stage
    downsamples 3x3/2 with padding 1, the stride-8 stage 3x3/2 without
    padding; later stages keep stride 1. This fixed padding scheme yields
    sides 61/31/15 for a 127 input and 125/63/31 for a 255 input.
    """
    s2 = (input_side - 7) // 2 + 1
    s4 = (s2 - 1) // 2 + 1
    s8 = (s4 - 3) // 2 + 1
    if s8 < 1:
        raise ValueError(f"input side {input_side} too small for the stride-8 backbone")
    return FeatureSides(s2=s2, s4=s4, s8=s8)


@dataclass
class FeaturePyramid:
    """Search-patch features at strides 8 / 4 / 2 plus the final stride-8 map.

    ``f1`` is the deepest skip map (stride 8), ``f2`` and ``f3`` come from
    progressively shallower stages (strides 4 and 2).
    """

    f1: torch.Tensor
    f2: torch.Tensor
    f3: torch.Tensor
    final: torch.Tensor


@dataclass
class ResponseGrid:
    """Per-cell outputs of one exemplar/search comparison."""

    features: torch.Tensor  # (B, C, g, g) correlation features
    scores: torch.Tensor  # (B, 1, g, g) two-branch / (B, 2k, g, g) three-branch
    mask_logits: torch.Tensor  # (B, mask_side**2, g, g)
    box_deltas: torch.Tensor | None = None  # (B, 4k, g, g), three-branch only

    def __post_init__(self):
        b, _, g, g2 = self.features.shape
        if g != g2:
            raise ValueError("response grid must be square")
        for t in (self.scores, self.mask_logits) + ((self.box_deltas,) if self.box_deltas is not None else ()):
            if t.shape[0] != b or t.shape[2:] != (g, g):
                raise ValueError(f"head output {tuple(t.shape)} inconsistent with grid ({b}, ., {g}, {g})")

    @property
    def grid_side(self) -> int:
        return self.features.shape[-1]


class _ToyBackbone(nn.Module):
    """Four plain conv stages with the 2-2-2-1 stride schedule."""

    def __init__(self, channels: tuple[int, int, int, int]):
        super().__init__()
        c1, c2, c3, c4 = channels
        self.stage1 = nn.Sequential(nn.Conv2d(3, c1, 7, stride=2, padding=0), nn.BatchNorm2d(c1), nn.ReLU(inplace=True))
        self.stage2 = nn.Sequential(nn.Conv2d(c1, c2, 3, stride=2, padding=1), nn.BatchNorm2d(c2), nn.ReLU(inplace=True))
        self.stage3 = nn.Sequential(nn.Conv2d(c2, c3, 3, stride=2, padding=0), nn.BatchNorm2d(c3), nn.ReLU(inplace=True))
        self.stage4 = nn.Sequential(
            nn.Conv2d(c3, c4, 3, stride=1, padding=2, dilation=2), nn.BatchNorm2d(c4), nn.ReLU(inplace=True)
        )
        self.out_channels = c4
        self.skip_channels = (c3, c2, c1)  # strides 8, 4, 2

    def forward(self, x: torch.Tensor) -> FeaturePyramid:
        a = self.stage1(x)
        b = self.stage2(a)
        c = self.stage3(b)
        d = self.stage4(c)
        return FeaturePyramid(f1=c, f2=b, f3=a, final=d)


class _Bottleneck(nn.Module):
    """Standard bottleneck; optional unpadded stride-2 downsampling.

    The unpadded 3x3 stride-2 convolution shrinks side n to (n-3)//2 + 1,
    and the shortcut samples the same positions by cropping one row/column
    before its strided 1x1 projection.
    """

    def __init__(self, in_ch: int, mid_ch: int, out_ch: int, downsample: bool = False, dilation: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, mid_ch, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(mid_ch)
        self.conv2 = nn.Conv2d(
            mid_ch,
            mid_ch,
            3,
            stride=2 if downsample else 1,
            padding=0 if downsample else dilation,
            dilation=dilation,
            bias=False,
        )
        self.bn2 = nn.BatchNorm2d(mid_ch)
        self.conv3 = nn.Conv2d(mid_ch, out_ch, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(out_ch)
        self.downsample = downsample
        if downsample or in_ch != out_ch:
            self.proj = nn.Conv2d(in_ch, out_ch, 1, stride=2 if downsample else 1, bias=False)
            self.proj_bn = nn.BatchNorm2d(out_ch)
        else:
            self.proj = None

    def forward(self, x):
        identity = x
        if self.proj is not None:
            identity = x[:, :, 1:, 1:] if self.downsample else x
            identity = self.proj_bn(self.proj(identity))
        out = F.relu(self.bn1(self.conv1(x)))
        out = F.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return F.relu(out + identity)


class _ResNet50C4(nn.Module):
    """ResNet-50 through stage 4, output stride reduced to 8 with dilation."""

    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 64, 7, stride=2, padding=0, bias=False)
        self.bn1 = nn.BatchNorm2d(64)
        self.maxpool = nn.MaxPool2d(3, stride=2, padding=1)
        self.layer2 = nn.Sequential(
            _Bottleneck(64, 64, 256), _Bottleneck(256, 64, 256), _Bottleneck(256, 64, 256)
        )
        self.layer3 = nn.Sequential(
            _Bottleneck(256, 128, 512, downsample=True),
            _Bottleneck(512, 128, 512),
            _Bottleneck(512, 128, 512),
            _Bottleneck(512, 128, 512),
        )
        self.layer4 = nn.Sequential(
            _Bottleneck(512, 256, 1024, dilation=2),
            *[_Bottleneck(1024, 256, 1024, dilation=2) for _ in range(5)],
        )
        self.out_channels = 1024
        self.skip_channels = (512, 256, 64)  # strides 8, 4, 2

    def forward(self, x: torch.Tensor) -> FeaturePyramid:
        stem = F.relu(self.bn1(self.conv1(x)))
        s4 = self.layer2(self.maxpool(stem))
        s8 = self.layer3(s4)
        final = self.layer4(s8)
        return FeaturePyramid(f1=s8, f2=s4, f3=stem, final=final)


def make_backbone(config: ModelConfig) -> nn.Module:
    if config.backbone_kind == "toy_convnet":
        return _ToyBackbone(config.toy_channels)
    return _ResNet50C4()


def depthwise_xcorr(z_feat: torch.Tensor, x_feat: torch.Tensor) -> torch.Tensor:
    """Per-channel valid cross-correlation of exemplar features over search features.

    Output side is ``x_side - z_side + 1`` and the channel count is preserved.
    """
    if z_feat.shape[:2] != x_feat.shape[:2]:
        raise ValueError(f"channel/batch mismatch: {tuple(z_feat.shape)} vs {tuple(x_feat.shape)}")
    b, c, hz, wz = z_feat.shape
    x = x_feat.reshape(1, b * c, *x_feat.shape[2:])
    kernel = z_feat.reshape(b * c, 1, hz, wz)
    out = F.conv2d(x, kernel, groups=b * c)
    return out.reshape(b, c, out.shape[2], out.shape[3])


class _Head(nn.Module):
    """Two 1x1 convolutions with a normalization + ReLU after the first."""

    def __init__(self, in_ch: int, hidden: int, out_ch: int):
        super().__init__()
        self.conv5 = nn.Conv2d(in_ch, hidden, 1)
        self.norm = nn.BatchNorm2d(hidden)
        self.conv6 = nn.Conv2d(hidden, out_ch, 1)

    def forward(self, x):
        return self.conv6(F.relu(self.norm(self.conv5(x))))


class _RefineModule(nn.Module):
    """One upsampling step mixing the mask representation with a skip feature.

    Branch A transforms the incoming representation with two convolutions and
    one non-linearity; branch B transforms the skip feature with three
    convolutions and two non-linearities; their sum is passed through a final
    non-linearity and upscaled.
    """

    def __init__(self, in_e: int, in_f: int, out_ch: int, out_side: int):
        super().__init__()
        mid = max(2 * out_ch, 4)
        self.a1 = nn.Conv2d(in_e, in_e, 3, padding=1)
        self.a2 = nn.Conv2d(in_e, out_ch, 3, padding=1)
        self.b1 = nn.Conv2d(in_f, mid, 3, padding=1)
        self.b2 = nn.Conv2d(mid, mid, 3, padding=1)
        self.b3 = nn.Conv2d(mid, out_ch, 3, padding=1)
        self.out_side = out_side

    def forward(self, e, f):
        a = self.a2(F.relu(self.a1(e)))
        b = self.b3(F.relu(self.b2(F.relu(self.b1(f)))))
        c = F.relu(a + b)
        return F.interpolate(c, size=(self.out_side, self.out_side), mode="bilinear", align_corners=False)


class RefinementDecoder(nn.Module):
    """Upsamples one response cell's features to an exemplar-scale mask logit map.

    The cell vector is deconvolved to a small map, then repeatedly fused with
    crops of the search feature pyramid that cover the cell's candidate
    window at strides 8, 4 and 2.
    """

    def __init__(self, config: ModelConfig, skip_channels: tuple[int, int, int]):
        super().__init__()
        z = feature_sides(config.exemplar_side)
        ch = config.refinement_channels
        self.crop_sides = (z.s8, z.s4, z.s2)
        self.deconv = nn.ConvTranspose2d(config.feature_channels, ch[0], z.s8)
        self.up1 = _RefineModule(ch[0], skip_channels[0], ch[1], z.s4)
        self.up2 = _RefineModule(ch[1], skip_channels[1], ch[2], z.s2)
        tail = max(ch[2] // 2, 2)
        self.up3 = _RefineModule(ch[2], skip_channels[2], tail, config.refined_mask_side)
        self.logit = nn.Conv2d(tail, 1, 3, padding=1)
        self.refined_side = config.refined_mask_side

    def forward(self, corr: torch.Tensor, pyramid: FeaturePyramid, positions) -> torch.Tensor:
        """Refined logits for ``positions`` = sequence of (batch, row, col).

        Returns (n_positions, refined_side**2).
        """
        s8, s4, s2 = self.crop_sides
        vecs, c8, c4, c2 = [], [], [], []
        for b, i, j in positions:
            vecs.append(corr[b, :, i, j])
            c8.append(pyramid.f1[b, :, i : i + s8, j : j + s8])
            c4.append(pyramid.f2[b, :, 2 * i : 2 * i + s4, 2 * j : 2 * j + s4])
            c2.append(pyramid.f3[b, :, 4 * i : 4 * i + s2, 4 * j : 4 * j + s2])
        e = self.deconv(torch.stack(vecs)[:, :, None, None])
        e = self.up1(e, torch.stack(c8))
        e = self.up2(e, torch.stack(c4))
        e = self.up3(e, torch.stack(c2))
        return self.logit(e).reshape(len(positions), self.refined_side**2)


class SiameseTracker(nn.Module):
    """Full model: backbone, adjust layers, correlation, heads, refinement."""

    def __init__(self, config: ModelConfig, variant: str = "three_branch"):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
        self.config = config
        self.variant = variant
        self.backbone = make_backbone(config)
        c = config.feature_channels
        # Exemplar and search branches deliberately do not share these.
        self.adjust_z = nn.Conv2d(self.backbone.out_channels, c, 1)
        self.adjust_x = nn.Conv2d(self.backbone.out_channels, c, 1)
        k = config.anchors_per_cell
        score_out = 2 * k if variant == "three_branch" else 1
        self.head_score = _Head(c, c, score_out)
        self.head_mask = _Head(c, c, config.mask_side**2)
        self.head_box = _Head(c, c, 4 * k) if variant == "three_branch" else None
        self.refiner = RefinementDecoder(config, self.backbone.skip_channels)

    def normalize(self, img: torch.Tensor) -> torch.Tensor:
        return (img - self.config.input_mean) / self.config.input_scale

    def backbone_forward(self, patch: torch.Tensor) -> FeaturePyramid:
        """Feature pyramid of a raw (B, 3, S, S) patch in [0, 255]."""
        if patch.ndim != 4 or patch.shape[1] != 3:
            raise ValueError(f"expected (B, 3, S, S) input, got {tuple(patch.shape)}")
        if patch.shape[2] != patch.shape[3]:
            raise ValueError("input patches must be square")
        return self.backbone(self.normalize(patch))

    def template(self, z_img: torch.Tensor) -> torch.Tensor:
        """Adjusted exemplar features, computed once per tracked object."""
        return self.adjust_z(self.backbone_forward(z_img).final)

    def search_features(self, x_img: torch.Tensor) -> tuple[torch.Tensor, FeaturePyramid]:
        pyr = self.backbone_forward(x_img)
        return self.adjust_x(pyr.final), pyr

    def heads(self, corr: torch.Tensor) -> ResponseGrid:
        return ResponseGrid(
            features=corr,
            scores=self.head_score(corr),
            mask_logits=self.head_mask(corr),
            box_deltas=self.head_box(corr) if self.head_box is not None else None,
        )

    def forward(self, z_img: torch.Tensor, x_img: torch.Tensor) -> tuple[ResponseGrid, FeaturePyramid]:
        z_feat = self.template(z_img)
        x_feat, pyramid = self.search_features(x_img)
        corr = depthwise_xcorr(z_feat, x_feat)
        return self.heads(corr), pyramid

    def refine(self, corr: torch.Tensor, pyramid: FeaturePyramid, positions) -> torch.Tensor:
        g = self.config.response_side
        for _, i, j in positions:
            if not (0 <= i < g and 0 <= j < g):
                raise IndexError(f"cell ({i}, {j}) outside the {g}x{g} response grid")
        return self.refiner(corr, pyramid, positions)


def build_model(config: ModelConfig, variant: str = "three_branch", seed: int | None = None) -> SiameseTracker:
    """Construct a model; with a seed, initialization is fully reproducible."""
    if seed is not None:
        torch.manual_seed(seed)
    return SiameseTracker(config, variant)


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def to_input(img: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """HWC uint8 image (or HW mask) to a (1, C, H, W) float tensor."""
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    t = torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).to(dtype)
    return t[None]


def save_checkpoint(path, net: SiameseTracker) -> None:
    """Single-archive checkpoint: config echo plus named parameter arrays."""
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "variant": net.variant,
        "config": dataclasses.asdict(net.config),
    }
    arrays = {"state:" + k: v.detach().cpu().numpy() for k, v in net.state_dict().items()}
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.bytes_(json.dumps(meta, sort_keys=True).encode()), **arrays)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


class CheckpointError(RuntimeError):
    pass


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> SiameseTracker:
    with np.load(path) as data:
        if "__meta__" not in data:
            raise CheckpointError(f"{path}: not a model checkpoint (missing metadata)")
        meta = json.loads(bytes(data["__meta__"].item()).decode())
        if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint format {meta.get('format_version')}")
        cfg_dict = dict(meta["config"])
        for key in ("refinement_channels", "toy_channels"):
            cfg_dict[key] = tuple(cfg_dict[key])
        config = ModelConfig(**cfg_dict)
        if expected_config is not None and config != expected_config:
            raise CheckpointError(f"{path}: checkpoint config does not match the requested config")
        net = SiameseTracker(config, meta["variant"])
        state = {k[len("state:") :]: torch.from_numpy(data[k]) for k in data.files if k.startswith("state:")}
        net.load_state_dict(state, strict=True)
        return net
