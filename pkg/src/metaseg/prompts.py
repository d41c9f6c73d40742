"""Image metadata -> climate zone -> per-class questions -> provider answers
-> one merged, tokenized, fixed-length prompt."""
from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .encoders import PAD_ID, TEXT_LEN, Vocabulary

log = logging.getLogger(__name__)

DEFAULT_TEMPLATE = ("Describe the shape, color, and texture of {class} and its typical nearby "
                    "geo-objects in a {zone} region, as seen in high-resolution remote sensing imagery.")
SIMPLE_PROMPT = "It is a remote sensing image."
GRID_RESOLUTION = 0.5


class ClimateLookupError(ValueError):
    pass


class GridFormatError(ValueError):
    pass


class ProviderError(RuntimeError):
    pass


def _data_path(name: str) -> Path:
    return Path(str(resources.files("metaseg") / "data" / name))


@dataclass
class ImageMetadata:
    latitude: float
    longitude: float
    region_name: str | None = None
    acquisition_time: str | None = None
    resolution_m: float | None = None

    def __post_init__(self):
        if not -90.0 <= self.latitude <= 90.0:
            raise ValueError(f"latitude {self.latitude} outside [-90, 90]")
        if not -180.0 <= self.longitude <= 180.0:
            raise ValueError(f"longitude {self.longitude} outside [-180, 180]")
        if self.resolution_m is not None and self.resolution_m <= 0:
            raise ValueError("resolution_m must be positive")


@dataclass(frozen=True)
class ClimateZone:
    code: str
    description: str


def load_legend(path=None) -> dict[str, str]:
    path = Path(path) if path else _data_path("koppen_legend.txt")
    out = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        code, desc = line.split("|", 1)
        out[code.strip()] = desc.strip()
    return out


class ClimateGrid:
    """Sparse 0.5-degree table of cell centre -> Koppen-Geiger code."""

    def __init__(self, cells: dict, legend: dict[str, str]):
        self.cells = cells
        self.legend = legend

    @classmethod
    def load(cls, path=None, legend=None) -> "ClimateGrid":
        path = Path(path) if path else _data_path("climate_grid.csv")
        legend = legend if legend is not None else load_legend()
        cells = {}
        for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise GridFormatError(f"{path}:{n}: expected 'lat,lon,code', got {line!r}")
            try:
                lat, lon = float(parts[0]), float(parts[1])
            except ValueError:
                raise GridFormatError(f"{path}:{n}: non-numeric coordinate in {line!r}") from None
            code = parts[2].strip()
            if code not in legend:
                raise GridFormatError(f"{path}:{n}: unknown climate code {code!r}")
            cells[_cell_key(lat, lon)] = code
        return cls(cells, legend)

    def zone(self, code: str) -> ClimateZone:
        return ClimateZone(code, self.legend[code])

    def cells_for(self, code: str) -> list[tuple[float, float]]:
        return sorted((k[0] / 4, k[1] / 4) for k, c in self.cells.items() if c == code)


def _cell_key(lat: float, lon: float) -> tuple[int, int]:
    # keys in quarter degrees so 0.25/0.75 centres stay integral
    return int(round(lat * 4)), int(round(lon * 4))


def _snap(v: float, lo: float, hi: float) -> float:
    c = np.floor(v / GRID_RESOLUTION) * GRID_RESOLUTION + GRID_RESOLUTION / 2
    return float(np.clip(c, lo + GRID_RESOLUTION / 2, hi - GRID_RESOLUTION / 2))


def lookup_climate(lat: float, lon: float, grid: ClimateGrid) -> ClimateZone:
    """Zone of the grid cell whose centre is nearest to (lat, lon)."""
    ImageMetadata(lat, lon)  # bounds check
    key = _cell_key(_snap(lat, -90, 90), _snap(lon, -180, 180))
    code = grid.cells.get(key)
    if code is None:
        raise ClimateLookupError(f"no climate data at ({lat}, {lon})")
    return grid.zone(code)


def build_question(class_name: str, zone: ClimateZone, template: str = DEFAULT_TEMPLATE) -> str:
    for ph in ("{class}", "{zone}"):
        if ph not in template:
            raise ValueError(f"question template lacks the {ph} placeholder")
    return template.replace("{class}", class_name.replace("_", " ")).replace("{zone}", zone.description)


def question_hash(question: str) -> str:
    return hashlib.sha256(question.encode("utf-8")).hexdigest()


# --------------------------------------------------------------------------
# providers


def fallback_description(class_name: str) -> str:
    return f"{class_name.replace('_', ' ')} area in a remote sensing image."


def load_canned(path=None) -> dict[tuple[str, str], str]:
    path = Path(path) if path else _data_path("canned_prompts.txt")
    out = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        zone, cls, desc = line.split("|", 2)
        out[(zone.strip(), cls.strip())] = desc.strip()
    return out


class CannedProvider:
    """Offline answers keyed by (zone code, class name)."""

    def __init__(self, table=None):
        self.table = load_canned() if table is None else dict(table)

    def answer(self, question: str, *, zone: ClimateZone, class_name: str) -> str:
        try:
            return self.table[(zone.code, class_name)]
        except KeyError:
            log.warning("no canned prompt for (%s, %s); using the generic description",
                        zone.code, class_name)
            return fallback_description(class_name)


class HttpProvider:
    """Chat-completion endpoint with an on-disk answer cache.

    Answers are stored as ``<cache_dir>/<sha256(question)>.json``.
    """

    def __init__(self, url: str, model: str, cache_dir, token_env: str = "OPENAI_API_KEY",
                 retries: int = 3, timeout: float = 30.0, backoff: float = 0.5):
        self.url = url
        self.model = model
        self.cache_dir = Path(cache_dir)
        self.token_env = token_env
        self.retries = retries
        self.timeout = timeout
        self.backoff = backoff
        self.network_calls = 0
        self._locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()

    def _lock(self, key: str) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(key, threading.Lock())

    def answer(self, question: str, **_) -> str:
        key = question_hash(question)
        path = self.cache_dir / f"{key}.json"
        with self._lock(key):
            if path.exists():
                return json.loads(path.read_text(encoding="utf-8"))["answer"]
            text = self._request(question, key)
            self.cache_dir.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp")
            tmp.write_text(json.dumps({"question": question, "answer": text}), encoding="utf-8")
            os.replace(tmp, path)
            return text

    def _request(self, question: str, key: str) -> str:
        import requests

        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        body = {"model": self.model, "messages": [{"role": "user", "content": question}]}
        last = None
        for attempt in range(self.retries):
            self.network_calls += 1
            try:
                r = requests.post(self.url, json=body, headers=headers, timeout=self.timeout)
                if 200 <= r.status_code < 300:
                    text = r.json()["choices"][0]["message"]["content"].strip()
                    if text:
                        return text
                    last = "empty answer"
                else:
                    last = f"HTTP {r.status_code}"
            except (requests.RequestException, KeyError, ValueError) as e:
                last = repr(e)
            if attempt + 1 < self.retries:
                time.sleep(self.backoff * (attempt + 1))
        raise ProviderError(f"question {key[:12]}: no answer after {self.retries} retries ({last})")


def query_provider(question: str, provider, zone: ClimateZone, class_name: str) -> str:
    ans = provider.answer(question, zone=zone, class_name=class_name)
    if not ans or not ans.strip():
        raise ProviderError(f"empty answer for question {question_hash(question)[:12]}")
    return ans.strip()


# --------------------------------------------------------------------------
# bundles


@dataclass
class PromptBundle:
    per_class_prompts: list
    merged_text: str
    token_ids: np.ndarray
    pad_mask: np.ndarray
    zone: str | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "zone": self.zone,
            "per_class_prompts": [list(p) for p in self.per_class_prompts],
            "merged_text": self.merged_text,
            "token_ids": self.token_ids.tolist(),
            "pad_mask": self.pad_mask.astype(int).tolist(),
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "PromptBundle":
        d = json.loads(text)
        return cls([tuple(p) for p in d["per_class_prompts"]], d["merged_text"],
                   np.array(d["token_ids"], dtype=np.int64), np.array(d["pad_mask"], dtype=bool),
                   d.get("zone"))


def tokenize_padded(text: str, vocab: Vocabulary, length: int = TEXT_LEN):
    """Encode, drop tokens past ``length``, pad with PAD."""
    ids = vocab.encode(text)[:length]
    out = np.full(length, PAD_ID, dtype=np.int64)
    out[:len(ids)] = ids
    return out, out == PAD_ID


def assemble_bundle(metadata: ImageMetadata, class_list, provider, vocab: Vocabulary,
                    grid: ClimateGrid | None = None, template: str = DEFAULT_TEMPLATE) -> PromptBundle:
    if not class_list:
        raise ValueError("class list is empty")
    grid = grid or default_grid()
    zone = lookup_climate(metadata.latitude, metadata.longitude, grid)
    prompts = []
    for name in class_list:
        q = build_question(name, zone, template)
        prompts.append((name, query_provider(q, provider, zone, name)))
    merged = " ".join(p for _, p in prompts)
    ids, mask = tokenize_padded(merged, vocab)
    return PromptBundle(prompts, merged, ids, mask, zone.code)


def simple_prompt_bundle(vocab: Vocabulary) -> PromptBundle:
    ids, mask = tokenize_padded(SIMPLE_PROMPT, vocab)
    return PromptBundle([], SIMPLE_PROMPT, ids, mask, None)


def corpus_texts(canned=None) -> list[str]:
    """Every text the default vocabulary must cover."""
    from .data import ALL_CLASSES

    canned = load_canned() if canned is None else canned
    return (list(canned.values()) + [SIMPLE_PROMPT]
            + [fallback_description(c) for c in ALL_CLASSES])


def build_vocabulary(canned=None) -> Vocabulary:
    return Vocabulary.build(corpus_texts(canned))


_GRID: ClimateGrid | None = None


def default_grid() -> ClimateGrid:
    global _GRID
    if _GRID is None:
        _GRID = ClimateGrid.load()
    return _GRID
