"""Domain-folder datasets, unpaired bag sampling, and a synthetic illumination set.

Images are kept as uint8 ``(M, C, H, W)`` tensors per domain and mapped to
[-1, 1] with ``p / 127.5 - 1`` when handed to a model.
"""

import io
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".webp", ".tif", ".tiff"}


class DataError(ValueError):
    pass


def normalize(u8: torch.Tensor, dtype=torch.float32) -> torch.Tensor:
    return u8.to(dtype) / 127.5 - 1.0


def denormalize(x: torch.Tensor) -> torch.Tensor:
    """[-1, 1] floats back to uint8, rounding to nearest."""
    return ((x.clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8)


@dataclass
class MultiDomainDataset:
    """One split of a dataset with N domains.

    ``scene_ids[d][k]`` names the scene shown by image ``k`` of domain ``d``;
    it is ``None`` when no ground-truth pairing is known.
    """
    names: List[str]
    images: List[torch.Tensor]
    filenames: Optional[List[List[str]]] = None
    scene_ids: Optional[List[List[int]]] = None

    def __post_init__(self):
        if len(self.names) != len(self.images):
            raise DataError("one image tensor per domain name expected")
        if len(self.names) < 2:
            raise DataError(f"need at least 2 domains, got {len(self.names)}")
        shapes = {tuple(t.shape[1:]) for t in self.images}
        if len(shapes) != 1:
            raise DataError(f"domains disagree on image shape: {shapes}")

    @property
    def num_domains(self):
        return len(self.names)

    @property
    def image_shape(self):
        return tuple(self.images[0].shape[1:])

    def sizes(self):
        return [len(t) for t in self.images]

    def image(self, domain, index, dtype=torch.float32):
        return normalize(self.images[domain][index], dtype)

    def domain_images(self, domain, dtype=torch.float32):
        return normalize(self.images[domain], dtype)

    @property
    def paired(self):
        return self.scene_ids is not None

    def partner(self, domain: int, index: int, other: int) -> int:
        """Index in ``other`` showing the same scene as ``(domain, index)``."""
        if not self.paired:
            raise DataError("dataset has no pairing table")
        lookup = self._lookup()
        return lookup[other][self.scene_ids[domain][index]]

    def _lookup(self):
        if getattr(self, "_lookup_cache", None) is None:
            self._lookup_cache = [{s: k for k, s in enumerate(ids)} for ids in self.scene_ids]
        return self._lookup_cache

    def without_pairing(self) -> "MultiDomainDataset":
        return MultiDomainDataset(list(self.names), list(self.images), self.filenames, None)


@dataclass
class UnpairedBag:
    """One independently drawn batch of images per domain."""
    domains: List[int]
    images: List[torch.Tensor]     # each (B, C, H, W) in [-1, 1]
    indices: List[List[int]]

    @property
    def entries(self):
        return list(zip(self.domains, self.images))


def sample_bag(dataset: MultiDomainDataset, rng: torch.Generator, batch_size=1,
               dtype=torch.float32) -> UnpairedBag:
    """Draw ``batch_size`` images uniformly at random from every domain."""
    images, indices = [], []
    for d, t in enumerate(dataset.images):
        if len(t) == 0:
            raise DataError(f"domain {dataset.names[d]!r} is empty")
        idx = torch.randint(len(t), (batch_size,), generator=rng)
        indices.append(idx.tolist())
        images.append(normalize(t[idx], dtype))
    return UnpairedBag(list(range(dataset.num_domains)), images, indices)


# -- decoding ---------------------------------------------------------------

def _to_tensor(img: Image.Image, image_size: int) -> torch.Tensor:
    img = img.convert("RGB")
    arr = torch.from_numpy(np.asarray(img, dtype=np.uint8).copy()).permute(2, 0, 1)
    if arr.shape[1:] != (image_size, image_size):
        resized = F.interpolate(arr[None].float(), size=(image_size, image_size),
                                mode="bilinear", align_corners=False, antialias=True)
        arr = resized[0].round().clamp(0, 255).to(torch.uint8)
    return arr


def decode_image(raw: bytes, image_size: int) -> torch.Tensor:
    """Decode image bytes into a uint8 ``(3, image_size, image_size)`` tensor."""
    try:
        with Image.open(io.BytesIO(raw)) as img:
            img.load()
            return _to_tensor(img, image_size)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DataError(f"cannot decode image: {exc}") from exc


def preprocess(raw_image_bytes: bytes, image_size: int) -> torch.Tensor:
    """Decode, bilinearly resize to a square and normalize to [-1, 1]."""
    return normalize(decode_image(raw_image_bytes, image_size))


def load_domain_folders(root, image_size: int) -> MultiDomainDataset:
    """Load ``root/<domain>/<image>``; domain ids follow sorted folder names."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root} is not a directory")
    dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if len(dirs) < 2:
        raise DataError(f"{root} must contain at least 2 domain folders")
    names, images, filenames = [], [], []
    for d in dirs:
        tensors, files = [], []
        for f in sorted(d.iterdir()):
            if f.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            try:
                tensors.append(decode_image(f.read_bytes(), image_size))
                files.append(f.name)
            except DataError as exc:
                warnings.warn(f"skipping {f}: {exc}")
        if not tensors:
            raise DataError(f"domain folder {d} has no decodable images")
        names.append(d.name)
        images.append(torch.stack(tensors))
        filenames.append(files)
    return MultiDomainDataset(names, images, filenames)


def load_split(root, split: str, image_size: int, with_pairing=True) -> MultiDomainDataset:
    """Load ``root/<split>/<domain>/...`` and attach ``root/pairs.json`` if present."""
    root = Path(root)
    ds = load_domain_folders(root / split, image_size)
    pairs_path = root / "pairs.json"
    if not with_pairing or not pairs_path.exists():
        return ds
    pairs = json.loads(pairs_path.read_text())
    by_file = {}
    for scene, per_domain in pairs.items():
        for dname, rel in per_domain.items():
            by_file[rel] = int(scene)
    try:
        ds.scene_ids = [[by_file[f"{split}/{name}/{fn}"] for fn in files]
                        for name, files in zip(ds.names, ds.filenames)]
    except KeyError as exc:
        raise DataError(f"image {exc} missing from pairs.json") from exc
    return ds


# -- synthetic illumination domains -----------------------------------------

PRESETS = [
    # name, per-channel gains, cubic mix (linear, square, cube), shading kind, strength
    ("normal", (1.0, 0.97, 0.92), (1.0, 0.0, 0.0), "flat", 0.0),
    ("shadow", (0.95, 0.95, 1.0), (0.6, 0.4, 0.0), "ramp", 0.7),
    ("dark", (0.62, 0.58, 0.55), (0.3, 0.3, 0.4), "vignette", 0.35),
]


@dataclass(frozen=True)
class DomainTransform:
    name: str
    gains: tuple
    curve: tuple
    shading: str
    strength: float
    angle: float = 0.0

    def tone(self, t: np.ndarray) -> np.ndarray:
        a, b, c = self.curve
        return a * t + b * t ** 2 + c * t ** 3

    def shading_field(self, size: int) -> np.ndarray:
        v, u = np.meshgrid(np.linspace(-1, 1, size), np.linspace(-1, 1, size), indexing="ij")
        if self.shading == "flat":
            return np.ones((size, size))
        if self.shading == "ramp":
            proj = np.cos(self.angle) * u + np.sin(self.angle) * v
            return 1.0 - self.strength * (proj + 1.0) / 2.0
        if self.shading == "vignette":
            return 1.0 - self.strength * np.clip((u ** 2 + v ** 2) / 2.0, 0, 1)
        raise ValueError(f"unknown shading {self.shading!r}")

    def __call__(self, scene: np.ndarray) -> np.ndarray:
        """Render a [0, 1] ``(H, W, 3)`` scene as a uint8 image of this domain."""
        size = scene.shape[0]
        out = self.tone(scene) * np.asarray(self.gains)[None, None, :]
        out = out * self.shading_field(size)[..., None]
        return np.clip(np.rint(out * 255.0), 0, 255).astype(np.uint8)


def domain_transforms(num_domains: int, seed: int) -> List[DomainTransform]:
    out = [DomainTransform(*p) for p in PRESETS[:num_domains]]
    rng = np.random.default_rng([seed, 7919])
    while len(out) < num_domains:
        k = len(out)
        mix = rng.dirichlet([1.0, 1.0, 1.0])
        out.append(DomainTransform(
            f"domain{k}", tuple(np.round(rng.uniform(0.55, 1.0, 3), 3)),
            tuple(np.round(mix, 3)), str(rng.choice(["ramp", "vignette"])),
            float(np.round(rng.uniform(0.2, 0.7), 3)), float(np.round(rng.uniform(0, 2 * np.pi), 3))))
    return out


@dataclass
class SynthSpec:
    num_domains: int = 3
    image_size: int = 64
    train_per_domain: int = 150
    test_per_domain: int = 99
    seed: int = 0

    def validate(self):
        if self.num_domains < 2:
            raise DataError(f"need at least 2 domains, got {self.num_domains}")
        if self.image_size < 8 or self.train_per_domain < 1 or self.test_per_domain < 1:
            raise DataError("invalid synthetic spec")
        return self

    def to_dict(self):
        d = asdict(self)
        d["transforms"] = [asdict(t) for t in domain_transforms(self.num_domains, self.seed)]
        return d


def render_scene(scene_id: int, size: int, seed: int) -> np.ndarray:
    """Random shapes over a smooth colored background; floats in [0, 1], (H, W, 3)."""
    rng = np.random.default_rng([seed, scene_id])
    coarse = torch.from_numpy(rng.uniform(0.2, 0.8, (1, 3, 4, 4)))
    img = F.interpolate(coarse, size=(size, size), mode="bicubic", align_corners=True)
    img = img[0].permute(1, 2, 0).clamp(0, 1).numpy().copy()
    yy, xx = np.mgrid[0:size, 0:size] / size
    for _ in range(rng.integers(3, 7)):
        color = rng.uniform(0.0, 1.0, 3)
        cx, cy = rng.uniform(0.1, 0.9, 2)
        r = rng.uniform(0.08, 0.25)
        kind = rng.integers(3)
        if kind == 0:
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 < r ** 2
        elif kind == 1:
            h = rng.uniform(0.5, 1.5) * r
            mask = (np.abs(xx - cx) < r) & (np.abs(yy - cy) < h)
        else:
            mask = (np.abs(xx - cx) + np.abs(yy - cy)) < r * 1.3
        img[mask] = color
    return img


@dataclass
class SynthDataset:
    spec: SynthSpec
    transforms: List[DomainTransform]
    train: MultiDomainDataset
    test: MultiDomainDataset

    def pairs(self) -> Dict[str, Dict[str, str]]:
        table = {}
        for split_name, split in (("train", self.train), ("test", self.test)):
            for d, name in enumerate(split.names):
                for fn, scene in zip(split.filenames[d], split.scene_ids[d]):
                    table.setdefault(str(scene), {})[name] = f"{split_name}/{name}/{fn}"
        return table


def synth_generate(spec: SynthSpec) -> SynthDataset:
    """Render every scene through every domain transform.

    Scenes ``0 .. train_per_domain-1`` form the training split and the
    following ``test_per_domain`` scenes the test split, so both splits are
    fully paired across domains and disjoint by scene.
    """
    spec.validate()
    transforms = domain_transforms(spec.num_domains, spec.seed)
    names = [t.name for t in transforms]

    def build(scene_range):
        scenes = [render_scene(s, spec.image_size, spec.seed) for s in scene_range]
        images = [torch.from_numpy(np.stack([t(sc) for sc in scenes])).permute(0, 3, 1, 2).contiguous()
                  for t in transforms]
        ids = list(scene_range)
        files = [f"s{s:05d}.png" for s in ids]
        return MultiDomainDataset(list(names), images, [list(files) for _ in names],
                                  [list(ids) for _ in names])

    train = build(range(spec.train_per_domain))
    test = build(range(spec.train_per_domain, spec.train_per_domain + spec.test_per_domain))
    return SynthDataset(spec, transforms, train, test)


def save_png(u8_chw: torch.Tensor, path):
    Image.fromarray(u8_chw.permute(1, 2, 0).numpy()).save(path, format="PNG", optimize=False)


def write_synth(ds: SynthDataset, root) -> Path:
    """Write ``root/{train,test}/<domain>/*.png``, ``pairs.json`` and ``spec.json``."""
    root = Path(root)
    for split_name, split in (("train", ds.train), ("test", ds.test)):
        for d, name in enumerate(split.names):
            folder = root / split_name / name
            folder.mkdir(parents=True, exist_ok=True)
            for img, fn in zip(split.images[d], split.filenames[d]):
                save_png(img, folder / fn)
    (root / "pairs.json").write_text(json.dumps(ds.pairs(), indent=1, sort_keys=True))
    (root / "spec.json").write_text(json.dumps(ds.spec.to_dict(), indent=2, sort_keys=True))
    return root
