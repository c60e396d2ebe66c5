"""Knowledge-graph fetcher and surface -> entity id resolver.

Live mode talks to a SPARQL endpoint and the entity search API. With a
``fixture_dir`` and ``record=False`` every response is replayed from disk and
no request leaves the process.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, NamedTuple
from urllib.parse import urlencode

from kbcmlm.vocab_builder import EntityRecord, RelationSchema, SOURCE_KG, write_entity_dump

log = logging.getLogger(__name__)

WIKIDATA_SPARQL = "https://query.wikidata.org/sparql"
WIKIDATA_API = "https://www.wikidata.org/w/api.php"
USER_AGENT = "kbcmlm/0.1 (knowledge base construction toolkit)"


class TransportError(RuntimeError):
    """The request could not be completed (as opposed to an empty answer)."""


class FixtureMissing(TransportError):
    pass


@dataclass(frozen=True)
class FetchSpec:
    endpoint: str = WIKIDATA_SPARQL
    property_map: Mapping[str, str] = field(default_factory=dict)
    page_size: int = 500
    rate_limit: float = 1.0
    fixture_dir: str | os.PathLike | None = None
    record: bool = False
    cache_dir: str | os.PathLike | None = None
    search_endpoint: str = WIKIDATA_API
    retries: int = 3
    backoff: float = 1.0

    def __post_init__(self):
        if self.page_size < 1:
            raise ValueError("page_size must be >= 1")
        if not self.rate_limit > 0:
            raise ValueError("rate_limit must be > 0")

    @property
    def replay(self) -> bool:
        return self.fixture_dir is not None and not self.record


def _requests_get(url: str, params: Mapping[str, str]) -> str:
    import requests

    try:
        r = requests.get(url, params=params, headers={"User-Agent": USER_AGENT}, timeout=60)
    except requests.RequestException as exc:
        raise TransportError(str(exc)) from exc
    if r.status_code != 200:
        raise TransportError(f"HTTP {r.status_code} from {url}")
    return r.text


def request_key(url: str, params: Mapping[str, str]) -> str:
    return hashlib.sha1(f"{url}?{urlencode(sorted(params.items()))}".encode()).hexdigest()


class KgClient:
    """Rate-limited, retrying GET with record/replay fixtures.

    ``requests_made`` counts requests handed to the transport and
    ``request_log`` keeps their monotonic timestamps.
    """

    def __init__(
        self,
        spec: FetchSpec,
        transport: Callable[[str, Mapping[str, str]], str] = _requests_get,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.spec = spec
        self.transport = transport
        self.clock = clock
        self.sleep = sleep
        self.requests_made = 0
        self.request_log: list[float] = []
        self._lock = threading.Lock()
        self._last: float | None = None

    def _throttle(self) -> None:
        gap = 1.0 / self.spec.rate_limit
        now = self.clock()
        if self._last is not None and now - self._last < gap:
            self.sleep(gap - (now - self._last))
            now = self.clock()
        self._last = now
        self.request_log.append(now)

    def get(self, url: str, params: Mapping[str, str]) -> str:
        key = request_key(url, params)
        if self.spec.replay:
            path = Path(self.spec.fixture_dir) / f"{key}.json"
            if not path.exists():
                raise FixtureMissing(f"no fixture for request {key}")
            return path.read_text(encoding="utf-8")
        last_exc: Exception | None = None
        for attempt in range(self.spec.retries):
            with self._lock:
                self._throttle()
                self.requests_made += 1
            try:
                text = self.transport(url, params)
                break
            except TransportError as exc:
                last_exc = exc
                log.warning("request failed (attempt %d): %s", attempt + 1, exc)
                if attempt + 1 < self.spec.retries:
                    self.sleep(self.spec.backoff * 2**attempt)
        else:
            raise TransportError(f"giving up after {self.spec.retries} attempts: {last_exc}")
        if self.spec.record and self.spec.fixture_dir is not None:
            d = Path(self.spec.fixture_dir)
            d.mkdir(parents=True, exist_ok=True)
            (d / f"{key}.json").write_text(text, encoding="utf-8")
        return text


def sparql_page(prop: str, limit: int, offset: int) -> str:
    return (
        "SELECT ?s ?sLabel ?o ?oLabel WHERE { "
        f"?s wdt:{prop} ?o . "
        'SERVICE wikibase:label { bd:serviceParam wikibase:language "en". } } '
        f"ORDER BY ?s ?o LIMIT {limit} OFFSET {offset}"
    )


def _qid(binding: dict, var: str) -> str | None:
    value = binding.get(var, {}).get("value")
    if value is None:
        return None
    return value.rsplit("/", 1)[-1]


class FetchReport(NamedTuple):
    records: list[EntityRecord]
    failures: dict[str, str]


def fetch_entities(
    spec: FetchSpec,
    schema: RelationSchema,
    out_path: str | os.PathLike,
    client: KgClient | None = None,
) -> FetchReport:
    """Page through each mapped relation property and write an entity dump.

    Failed relations are reported in ``failures``; whatever was collected is
    still written.
    """
    client = client or KgClient(spec)
    found: dict[tuple[str, str], str | None] = {}
    failures: dict[str, str] = {}
    for relation in sorted(spec.property_map):
        rel = schema.relation(relation)
        prop = spec.property_map[relation]
        offset = 0
        try:
            while True:
                text = client.get(
                    spec.endpoint, {"query": sparql_page(prop, spec.page_size, offset), "format": "json"}
                )
                bindings = json.loads(text)["results"]["bindings"]
                for b in bindings:
                    s_label = b.get("sLabel", {}).get("value")
                    if s_label:
                        found.setdefault((s_label, rel.subject_type), _qid(b, "s"))
                    o_label = b.get("oLabel", {}).get("value")
                    if o_label and not rel.numeric:
                        found.setdefault((o_label, rel.object_type), _qid(b, "o"))
                if len(bindings) < spec.page_size:
                    break
                offset += spec.page_size
        except (TransportError, ValueError, KeyError) as exc:
            failures[relation] = str(exc)
            log.error("fetch for %s failed: %s", relation, exc)
    records = [EntityRecord(s, t, qid, SOURCE_KG) for (s, t), qid in sorted(found.items())]
    write_entity_dump(out_path, records)
    if failures:
        log.warning("fetch finished with %d failed relations: %s", len(failures), sorted(failures))
    return FetchReport(records, failures)


def _cache_path(directory: str | os.PathLike, surface: str) -> Path:
    return Path(directory) / f"{hashlib.sha1(surface.encode('utf-8')).hexdigest()}.json"


def resolve_surface(spec: FetchSpec, surface: str, client: KgClient | None = None) -> str | None:
    """Entity id of the top-ranked exact-label match for ``surface``, else ``None``.

    Answers are cached as ``<cache>/<sha1(surface)>.json``. In replay mode
    only the cache (the fixture directory) is consulted.
    """
    if not surface:
        raise ValueError("empty surface")
    cache = spec.cache_dir if spec.cache_dir is not None else spec.fixture_dir
    if cache is not None:
        path = _cache_path(cache, surface)
        if path.exists():
            return json.loads(path.read_text(encoding="utf-8")).get("entity_id")
    if spec.replay:
        return None
    client = client or KgClient(spec)
    text = client.get(
        spec.search_endpoint,
        {"action": "wbsearchentities", "search": surface, "language": "en", "format": "json", "limit": "10"},
    )
    try:
        hits = json.loads(text).get("search", [])
    except ValueError as exc:
        raise TransportError(f"unparseable search response: {exc}") from exc
    entity_id = next((h.get("id") for h in hits if h.get("label") == surface), None)
    if cache is not None:
        path = _cache_path(cache, surface)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({"surface": surface, "entity_id": entity_id}) + "\n", encoding="utf-8")
    return entity_id


class SurfaceResolver:
    """Callable resolver: a local table first, then the (cached) KG lookup."""

    def __init__(self, table: Mapping[str, str] | None = None, spec: FetchSpec | None = None, client: KgClient | None = None):
        self.table = dict(table or {})
        self.spec = spec
        self.client = client if client is not None else (KgClient(spec) if spec is not None else None)

    def __call__(self, surface: str) -> str | None:
        if surface in self.table:
            return self.table[surface]
        if self.spec is None:
            return None
        return resolve_surface(self.spec, surface, self.client)
