"""Clients for the four evidence services: descriptor extraction, open-vocabulary
detection, region proposals and OCR.

Every service speaks JSON over HTTP::

    POST /descriptors {image_b64|image_url, question}  -> {"descriptors": [...]}
    POST /detect      {image_b64|image_url, phrases}   -> {"detections": [{"box", "phrase", "score"}]}
    POST /propose     {image_b64|image_url}            -> {"boxes": [[x1, y1, x2, y2], ...]}
    POST /ocr         {image_b64|image_url}            -> {"items": [{"box", "text", "confidence"}]}

:class:`StubEvidenceClient` replays recorded response bodies from a fixture
directory, keyed by a hash of the request, so the dataset pipeline runs
without any network access. :class:`LiveEvidenceClient` can record what it
receives into the same layout.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import threading
import time
import uuid
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence, Union

import httpx

from .dataset import DescriptorSet, EmptyDescriptorSet as _EmptyDescriptors
from .geometry import BBox, ImageExtent, InvalidGeometry, image_extent
from .rewards import ConfigError

logger = logging.getLogger(__name__)

SERVICES = ("descriptors", "detect", "propose", "ocr")
ENV_PREFIX = "DEFACTO_"
CORRELATION_HEADER = "X-Correlation-ID"

ImageRef = Union[str, Path]


class EvidenceError(RuntimeError):
    retryable = False


class ServiceTimeout(EvidenceError):
    retryable = True


class MalformedResponse(EvidenceError):
    retryable = True


class EmptyDescriptorSet(EvidenceError):
    retryable = True


class FixtureMissing(EvidenceError):
    pass


class ServiceConfigError(ConfigError):
    pass


@dataclass(frozen=True)
class ServiceEndpoint:
    base_url: str = ""
    timeout: float = 30.0
    retries: int = 2
    mode: str = "stub"
    fixture_dir: Optional[Path] = None

    def __post_init__(self) -> None:
        if self.timeout <= 0:
            raise ServiceConfigError(f"timeout must be positive, got {self.timeout}")
        if self.retries < 0:
            raise ServiceConfigError(f"retry budget must be >= 0, got {self.retries}")
        if self.mode not in ("live", "stub"):
            raise ServiceConfigError(f"mode must be 'live' or 'stub', got {self.mode!r}")
        if self.mode == "stub" and self.fixture_dir is None:
            raise ServiceConfigError("stub mode requires a fixture directory")
        if self.mode == "live" and not self.base_url:
            raise ServiceConfigError("live mode requires a base_url")


@dataclass(frozen=True)
class Detection:
    box: BBox
    phrase: str
    score: float


@dataclass(frozen=True)
class OcrItem:
    box: BBox
    text: str
    confidence: float


# ---------------------------------------------------------------- validation


def _number(v: object) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _box(raw: object, extent: Optional[ImageExtent], what: str) -> BBox:
    if not isinstance(raw, list) or len(raw) != 4 or not all(isinstance(v, int) and not isinstance(v, bool)
                                                             for v in raw):
        raise MalformedResponse(f"{what}: box must be 4 integers, got {raw!r}")
    try:
        box = BBox(*raw)
    except InvalidGeometry as exc:
        raise MalformedResponse(f"{what}: {exc}") from exc
    if extent is not None and not box.within(extent):
        raise MalformedResponse(f"{what}: box {raw} outside {extent.width}x{extent.height}")
    return box


def _field(body: object, key: str) -> list:
    if not isinstance(body, dict) or not isinstance(body.get(key), list):
        raise MalformedResponse(f"response must be an object with a {key!r} list")
    return body[key]


def parse_descriptors(body: object) -> DescriptorSet:
    items = _field(body, "descriptors")
    if not all(isinstance(d, str) for d in items):
        raise MalformedResponse("descriptors must be strings")
    try:
        return DescriptorSet(tuple(items))
    except _EmptyDescriptors as exc:
        raise EmptyDescriptorSet(str(exc)) from exc


def parse_detections(body: object, extent: Optional[ImageExtent]) -> list[Detection]:
    out = []
    for i, d in enumerate(_field(body, "detections")):
        if not isinstance(d, dict) or not isinstance(d.get("phrase"), str) or not _number(d.get("score")):
            raise MalformedResponse(f"detection {i} must have box, phrase and numeric score")
        if not 0.0 <= d["score"] <= 1.0:
            raise MalformedResponse(f"detection {i} score {d['score']} outside [0, 1]")
        out.append(Detection(_box(d.get("box"), extent, f"detection {i}"), d["phrase"], float(d["score"])))
    # stable sort keeps the service order among ties
    return sorted(out, key=lambda d: -d.score)


def parse_proposals(body: object, extent: Optional[ImageExtent]) -> list[BBox]:
    return [_box(b, extent, f"proposal {i}") for i, b in enumerate(_field(body, "boxes"))]


def parse_ocr(body: object, extent: Optional[ImageExtent], min_confidence: float) -> list[OcrItem]:
    out = []
    for i, it in enumerate(_field(body, "items")):
        if not isinstance(it, dict) or not isinstance(it.get("text"), str) or not _number(it.get("confidence")):
            raise MalformedResponse(f"ocr item {i} must have box, text and numeric confidence")
        if not 0.0 <= it["confidence"] <= 1.0:
            raise MalformedResponse(f"ocr item {i} confidence outside [0, 1]")
        item = OcrItem(_box(it.get("box"), extent, f"ocr item {i}"), it["text"], float(it["confidence"]))
        if item.confidence >= min_confidence:
            out.append(item)
    return out


# --------------------------------------------------------------- fixtures


def _is_url(image: ImageRef) -> bool:
    return isinstance(image, str) and image.startswith(("http://", "https://"))


def image_digest(image: ImageRef) -> str:
    if _is_url(image):
        return hashlib.sha256(str(image).encode()).hexdigest()
    return hashlib.sha256(Path(image).read_bytes()).hexdigest()


def request_key(service: str, image: ImageRef, params: Mapping[str, object]) -> str:
    """Stable fixture key: the service name, the image content hash and the request parameters."""
    payload = {"service": service, "image": image_digest(image), "params": dict(params)}
    return hashlib.sha256(json.dumps(payload, sort_keys=True, ensure_ascii=False).encode()).hexdigest()


def fixture_path(fixture_dir: Union[str, Path], service: str, image: ImageRef,
                 params: Mapping[str, object]) -> Path:
    return Path(fixture_dir) / service / f"{request_key(service, image, params)}.json"


def write_fixture(fixture_dir: Union[str, Path], service: str, image: ImageRef,
                  params: Mapping[str, object], body: object) -> Path:
    path = fixture_path(fixture_dir, service, image, params)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(body, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------- clients


class EvidenceClient:
    """Validated access to the four services; subclasses supply ``_request``."""

    def __init__(self, ocr_min_confidence: float = 0.3):
        self.ocr_min_confidence = ocr_min_confidence

    def _request(self, service: str, image: ImageRef, params: dict) -> object:
        raise NotImplementedError

    def _call(self, service: str, image: ImageRef, params: dict, parse_body: Callable[[object], object]):
        return parse_body(self._request(service, image, params))

    @staticmethod
    def _extent(image: ImageRef) -> Optional[ImageExtent]:
        return None if _is_url(image) else image_extent(image)

    def extract_descriptors(self, image: ImageRef, question: str) -> DescriptorSet:
        return self._call("descriptors", image, {"question": question}, parse_descriptors)

    def detect(self, image: ImageRef, descriptors: Union[DescriptorSet, Sequence[str]]) -> list[Detection]:
        phrases = list(descriptors)
        if not phrases:
            raise ValueError("detect needs at least one descriptor")
        extent = self._extent(image)
        return self._call("detect", image, {"phrases": phrases}, lambda b: parse_detections(b, extent))

    def propose_regions(self, image: ImageRef) -> list[BBox]:
        extent = self._extent(image)
        return self._call("propose", image, {}, lambda b: parse_proposals(b, extent))

    def read_text(self, image: ImageRef) -> list[OcrItem]:
        extent = self._extent(image)
        return self._call("ocr", image, {}, lambda b: parse_ocr(b, extent, self.ocr_min_confidence))


class StubEvidenceClient(EvidenceClient):
    """Replays fixture files; a missing fixture is a hard, non-retryable error."""

    def __init__(self, fixture_dir: Union[str, Path], ocr_min_confidence: float = 0.3):
        super().__init__(ocr_min_confidence)
        self.fixture_dir = Path(fixture_dir)

    def _request(self, service: str, image: ImageRef, params: dict) -> object:
        path = fixture_path(self.fixture_dir, service, image, params)
        if not path.is_file():
            raise FixtureMissing(f"no {service} fixture for {image} ({path.name})")
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except ValueError as exc:
            raise MalformedResponse(f"fixture {path} is not JSON: {exc}") from exc

    def propose_regions(self, image: ImageRef) -> list[BBox]:
        boxes = super().propose_regions(image)
        if not boxes and not _is_url(image):
            # an empty proposal set would leave nothing to partition
            boxes = [image_extent(image).full_box()]
        return boxes


class LiveEvidenceClient(EvidenceClient):
    """HTTP client with bounded concurrency, correlation ids and exponential backoff."""

    def __init__(
        self,
        endpoints: Mapping[str, ServiceEndpoint],
        max_in_flight: int = 4,
        ocr_min_confidence: float = 0.3,
        record_dir: Union[str, Path, None] = None,
        backoff: float = 0.5,
        transport: Optional[httpx.BaseTransport] = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        super().__init__(ocr_min_confidence)
        missing = [s for s in SERVICES if s not in endpoints]
        if missing:
            raise ServiceConfigError(f"no endpoint configured for {missing}")
        self.endpoints = dict(endpoints)
        self.record_dir = Path(record_dir) if record_dir is not None else None
        self.backoff = backoff
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._http = httpx.Client(transport=transport)

    def close(self) -> None:
        self._http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _body(self, image: ImageRef, params: dict) -> dict:
        if _is_url(image):
            body = {"image_url": str(image)}
        else:
            body = {"image_b64": base64.b64encode(Path(image).read_bytes()).decode("ascii")}
        body.update(params)
        return body

    def _post_once(self, service: str, body: dict) -> object:
        ep = self.endpoints[service]
        cid = uuid.uuid4().hex
        url = ep.base_url.rstrip("/") + f"/{service}"
        with self._slots:
            try:
                resp = self._http.post(url, json=body, timeout=ep.timeout, headers={CORRELATION_HEADER: cid})
            except httpx.TimeoutException as exc:
                raise ServiceTimeout(f"{service}: timed out after {ep.timeout}s") from exc
            except httpx.TransportError as exc:
                raise ServiceTimeout(f"{service}: transport error {exc}") from exc
        echoed = resp.headers.get(CORRELATION_HEADER)
        if echoed is not None and echoed != cid:
            raise MalformedResponse(f"{service}: correlation id mismatch")
        if resp.status_code >= 500:
            raise ServiceTimeout(f"{service}: server error {resp.status_code}")
        if resp.status_code != 200:
            raise EvidenceError(f"{service}: HTTP {resp.status_code}")
        try:
            return resp.json()
        except ValueError as exc:
            raise MalformedResponse(f"{service}: body is not JSON") from exc

    def _call(self, service: str, image: ImageRef, params: dict, parse_body: Callable[[object], object]):
        retries = self.endpoints[service].retries
        body = self._body(image, params)
        for attempt in range(retries + 1):
            try:
                raw = self._post_once(service, body)
                result = parse_body(raw)
            except EvidenceError as exc:
                if not exc.retryable or attempt == retries:
                    raise
                delay = self.backoff * 2 ** attempt
                logger.warning("%s failed (%s); retry %d/%d in %.2fs", service, exc, attempt + 1, retries, delay)
                self._sleep(delay)
                continue
            if self.record_dir is not None:
                write_fixture(self.record_dir, service, image, params, raw)
            return result
        raise AssertionError("unreachable")


# ------------------------------------------------------------------ config


@dataclass(frozen=True)
class ServicesConfig:
    mode: str
    endpoints: dict[str, ServiceEndpoint]
    fixture_dir: Optional[Path] = None
    max_in_flight: int = 4
    ocr_min_confidence: float = 0.3
    record_dir: Optional[Path] = None


def load_services_config(
    path: Union[str, Path, None] = None,
    mode: Optional[str] = None,
    env: Optional[Mapping[str, str]] = None,
) -> ServicesConfig:
    """Read the services JSON file (optional) and ``DEFACTO_<SERVICE>_URL`` overrides.

    Relative ``fixture_dir``/``record_dir`` entries resolve against the file's directory.
    """
    env = os.environ if env is None else env
    data: dict = {}
    base = Path.cwd()
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise ServiceConfigError(f"cannot read services config {path}: {exc}") from exc
        base = Path(path).resolve().parent
    mode = mode or data.get("mode", "stub")
    if mode not in ("live", "stub"):
        raise ServiceConfigError(f"mode must be 'live' or 'stub', got {mode!r}")

    def resolve(p: Optional[str]) -> Optional[Path]:
        return None if p is None else (base / p if not Path(p).is_absolute() else Path(p))

    fixture_dir = resolve(data.get("fixture_dir"))
    services = data.get("services", {})
    endpoints = {}
    for name in SERVICES:
        spec = dict(services.get(name, {}))
        url = env.get(f"{ENV_PREFIX}{name.upper()}_URL") or spec.get("base_url", "")
        if mode == "live" and not url:
            raise ServiceConfigError(
                f"live mode: no endpoint for {name!r} (set services.{name}.base_url or "
                f"{ENV_PREFIX}{name.upper()}_URL)")
        endpoints[name] = ServiceEndpoint(
            base_url=url,
            timeout=float(spec.get("timeout", data.get("timeout", 30.0))),
            retries=int(spec.get("retries", data.get("retries", 2))),
            mode=mode,
            fixture_dir=fixture_dir,
        )
    return ServicesConfig(
        mode=mode,
        endpoints=endpoints,
        fixture_dir=fixture_dir,
        max_in_flight=int(data.get("max_in_flight", 4)),
        ocr_min_confidence=float(data.get("ocr_min_confidence", 0.3)),
        record_dir=resolve(data.get("record_dir")),
    )


def make_client(cfg: ServicesConfig, transport: Optional[httpx.BaseTransport] = None) -> EvidenceClient:
    if cfg.mode == "stub":
        return StubEvidenceClient(cfg.fixture_dir, cfg.ocr_min_confidence)
    return LiveEvidenceClient(cfg.endpoints, cfg.max_in_flight, cfg.ocr_min_confidence,
                              record_dir=cfg.record_dir, transport=transport)
