"""Signed, quota-limited uploads into a revisioned mock object store.

The store is one state machine with two front ends: direct method calls
(``ChoreoClient``) and a small HTTP service (``serve`` / ``HttpChoreoClient``):

    PUT /objects/<path>    body = object octets; signature headers required
    GET /objects/latest    newest inventory document (X-Revision header)
    GET /objects/<path>    newest object stored at <path>
    GET /manifest          the MANIFEST log

Errors map to 401 (bad signature), 429 (quota), 404 (nothing stored).
"""

from __future__ import annotations

import hashlib
import hmac
import http.server
import logging
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

from fridgesim.inventory import INVENTORY_RE

log = logging.getLogger(__name__)

DEFAULT_QUOTA_LIMIT = 250
DEFAULT_QUOTA_PERIOD_MS = 30 * 24 * 3600 * 1000
LATEST_ALIAS = "latest.json"

HDR_SIGNATURE = "X-Choreo-Signature"
HDR_NONCE = "X-Choreo-Nonce"
HDR_TIMESTAMP = "X-Choreo-Timestamp"
HDR_APP_KEY = "X-Choreo-App-Key"
HDR_TOKEN_KEY = "X-Choreo-Token-Key"


class StoreError(Exception):
    status = 500


class AuthError(StoreError):
    status = 401


class QuotaExceeded(StoreError):
    status = 429


class EmptyStore(StoreError):
    status = 404


@dataclass(frozen=True)
class ChoreoCredentials:
    app_key: str
    app_secret: str
    token_key: str
    token_secret: str

    def __post_init__(self):
        for name in ("app_key", "app_secret", "token_key", "token_secret"):
            if not getattr(self, name):
                raise ValueError(f"credential {name} is empty")

    def __repr__(self) -> str:
        return f"ChoreoCredentials(app_key={self.app_key!r}, token_key={self.token_key!r})"


def canonical_string(method: str, path: str, body_digest: bytes, nonce: str, ts: int) -> bytes:
    return "\n".join([method.upper(), path, body_digest.hex(), nonce, str(ts)]).encode("utf-8")


def sign_request(
    creds: ChoreoCredentials,
    method: str,
    path: str,
    body_digest: bytes,
    nonce: str,
    ts: int,
) -> str:
    if not isinstance(creds, ChoreoCredentials):
        raise TypeError("credentials required")
    key = f"{creds.app_secret}&{creds.token_secret}".encode("utf-8")
    return hmac.new(key, canonical_string(method, path, body_digest, nonce, ts), hashlib.sha256).hexdigest()


def object_url_path(path: str) -> str:
    return "/" + path.lstrip("/")


# -- quota ------------------------------------------------------------------

@dataclass
class QuotaLedger:
    limit: int = DEFAULT_QUOTA_LIMIT
    used: int = 0
    period_start: int = 0
    period: int = DEFAULT_QUOTA_PERIOD_MS

    @property
    def remaining(self) -> int:
        return max(self.limit - self.used, 0)


def tick_quota(ledger: QuotaLedger, now: int) -> QuotaLedger:
    """Ledger after rolling forward to ``now``; the boundary itself resets."""
    if now < ledger.period_start + ledger.period:
        return ledger
    elapsed = (now - ledger.period_start) // ledger.period
    return replace(ledger, used=0, period_start=ledger.period_start + elapsed * ledger.period)


# -- store ------------------------------------------------------------------

@dataclass(frozen=True)
class StoredObject:
    path: str
    revision: int
    octets: bytes
    stored_at: int

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.octets).hexdigest()

    def manifest_line(self) -> str:
        return f"{self.revision} {self.path} {len(self.octets)} {self.digest} {self.stored_at}"


def is_inventory_path(path: str) -> bool:
    return INVENTORY_RE.match(path) is not None


def inventory_seq(path: str) -> int:
    return int(INVENTORY_RE.match(path).group(1))


class MockStore:
    """Dropbox-like revisioned store. Writes are serialised by one lock and
    become visible only once complete. With ``directory`` set, every write
    lands as ``<revision>_<path>`` plus a MANIFEST line."""

    def __init__(self, directory: str | Path | None = None):
        self._lock = threading.Lock()
        self._log: list[StoredObject] = []
        self._by_path: dict[str, StoredObject] = {}
        self._latest_inventory: Optional[StoredObject] = None
        self.directory = Path(directory) if directory is not None else None
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)
            self._load()

    def _load(self) -> None:
        manifest = self.directory / "MANIFEST"
        if not manifest.exists():
            return
        for line in manifest.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            rev, path, _size, digest, stored_at = line.split(" ")
            octets = (self.directory / f"{rev}_{path}").read_bytes()
            if hashlib.sha256(octets).hexdigest() != digest:
                raise StoreError(f"object {rev}_{path} does not match its MANIFEST digest")
            self._commit(StoredObject(path, int(rev), octets, int(stored_at)))

    def _commit(self, obj: StoredObject) -> None:
        self._log.append(obj)
        self._by_path[obj.path] = obj
        if is_inventory_path(obj.path):
            self._latest_inventory = obj

    def write(self, path: str, octets: bytes, stored_at: int) -> int:
        if not path or "/" in path or path == LATEST_ALIAS or path.startswith("."):
            raise ValueError(f"invalid object path {path!r}")
        with self._lock:
            revision = self._log[-1].revision + 1 if self._log else 1
            obj = StoredObject(path, revision, bytes(octets), int(stored_at))
            if self.directory is not None:
                target = self.directory / f"{revision}_{path}"
                tmp = target.with_name(target.name + ".tmp")
                tmp.write_bytes(obj.octets)
                tmp.replace(target)
                with open(self.directory / "MANIFEST", "a", encoding="utf-8") as fh:
                    fh.write(obj.manifest_line() + "\n")
                if is_inventory_path(path):
                    alias = self.directory / LATEST_ALIAS
                    alias.with_name(LATEST_ALIAS + ".tmp").write_bytes(obj.octets)
                    alias.with_name(LATEST_ALIAS + ".tmp").replace(alias)
            self._commit(obj)
            return revision

    def get(self, path: str) -> StoredObject:
        with self._lock:
            if path == LATEST_ALIAS:
                obj = self._latest_inventory
            else:
                obj = self._by_path.get(path)
        if obj is None:
            raise EmptyStore(f"no object at {path!r}")
        return obj

    def get_object(self, path: str) -> bytes:
        return self.get(path).octets

    def fetch_latest(self) -> tuple[bytes, int]:
        with self._lock:
            obj = self._latest_inventory
        if obj is None:
            raise EmptyStore("store holds no inventory document")
        return obj.octets, obj.revision

    def objects(self) -> list[StoredObject]:
        with self._lock:
            return list(self._log)

    def inventory_objects(self) -> list[StoredObject]:
        return [o for o in self.objects() if is_inventory_path(o.path)]

    @property
    def revision(self) -> int:
        with self._lock:
            return self._log[-1].revision if self._log else 0

    def manifest(self) -> str:
        return "".join(o.manifest_line() + "\n" for o in self.objects())


def fetch_latest(store: MockStore) -> tuple[bytes, int]:
    return store.fetch_latest()


class ChoreoEndpoint:
    """Server side of the choreo: checks identity, signature and quota, then
    writes. A rejected call leaves the store and ledger untouched."""

    def __init__(self, store: MockStore, creds: ChoreoCredentials, ledger: Optional[QuotaLedger] = None):
        self.store = store
        self.creds = creds
        self.ledger = ledger if ledger is not None else QuotaLedger()
        self._lock = threading.Lock()

    def put(
        self,
        path: str,
        octets: bytes,
        signature: str,
        nonce: str,
        ts: int,
        now: int,
        app_key: Optional[str] = None,
        token_key: Optional[str] = None,
    ) -> int:
        if not path:
            raise ValueError("object path is empty")
        if app_key is not None and app_key != self.creds.app_key:
            raise AuthError("unknown application key")
        if token_key is not None and token_key != self.creds.token_key:
            raise AuthError("unknown token key")
        expected = sign_request(
            self.creds, "PUT", object_url_path(path), hashlib.sha256(octets).digest(), nonce, ts
        )
        if not hmac.compare_digest(expected, signature):
            raise AuthError("signature mismatch")
        with self._lock:
            self.ledger = tick_quota(self.ledger, now)
            if self.ledger.used >= self.ledger.limit:
                raise QuotaExceeded(f"quota of {self.ledger.limit} calls used up")
            revision = self.store.write(path, octets, now)
            self.ledger.used += 1
            return revision


def upload(
    endpoint: ChoreoEndpoint,
    creds: ChoreoCredentials,
    path: str,
    octets: bytes,
    now: int,
    nonce: Optional[str] = None,
) -> int:
    """Sign and submit one object; returns its store revision."""
    if not path:
        raise ValueError("object path is empty")
    nonce = nonce if nonce is not None else f"{now}-{path}"
    signature = sign_request(
        creds, "PUT", object_url_path(path), hashlib.sha256(octets).digest(), nonce, now
    )
    return endpoint.put(path, octets, signature, nonce, now, now, creds.app_key, creds.token_key)


class ChoreoClient:
    """In-process client bound to one endpoint and one set of credentials."""

    def __init__(self, endpoint: ChoreoEndpoint, creds: ChoreoCredentials):
        self.endpoint = endpoint
        self.creds = creds
        self._calls = 0

    def upload(self, path: str, octets: bytes, now: int) -> int:
        self._calls += 1
        return upload(self.endpoint, self.creds, path, octets, now, nonce=f"{now}-{self._calls}")

    def fetch_latest(self) -> tuple[bytes, int]:
        return self.endpoint.store.fetch_latest()


# -- HTTP -------------------------------------------------------------------

class HttpChoreoClient:
    def __init__(self, base_url: str, creds: Optional[ChoreoCredentials] = None, timeout: float = 5.0):
        self.base_url = base_url.rstrip("/")
        self.creds = creds
        self.timeout = timeout
        self._calls = 0

    def _request(self, req: urllib.request.Request) -> tuple[bytes, dict]:
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return resp.read(), dict(resp.headers)
        except urllib.error.HTTPError as exc:
            detail = exc.read().decode("utf-8", "replace")
            for cls in (AuthError, QuotaExceeded, EmptyStore):
                if exc.code == cls.status:
                    raise cls(detail) from None
            raise StoreError(f"HTTP {exc.code}: {detail}") from None

    def upload(self, path: str, octets: bytes, now: int) -> int:
        if self.creds is None:
            raise AuthError("no credentials configured")
        self._calls += 1
        nonce = f"{now}-{self._calls}"
        signature = sign_request(
            self.creds, "PUT", object_url_path(path), hashlib.sha256(octets).digest(), nonce, now
        )
        req = urllib.request.Request(
            f"{self.base_url}/objects/{path}",
            data=octets,
            method="PUT",
            headers={
                HDR_SIGNATURE: signature,
                HDR_NONCE: nonce,
                HDR_TIMESTAMP: str(now),
                HDR_APP_KEY: self.creds.app_key,
                HDR_TOKEN_KEY: self.creds.token_key,
            },
        )
        body, _ = self._request(req)
        return int(body.decode("ascii").strip())

    def fetch_latest(self) -> tuple[bytes, int]:
        body, headers = self._request(urllib.request.Request(f"{self.base_url}/objects/latest"))
        return body, int(headers.get("X-Revision", "0"))

    def get_object(self, path: str) -> bytes:
        body, _ = self._request(urllib.request.Request(f"{self.base_url}/objects/{path}"))
        return body

    def manifest(self) -> str:
        body, _ = self._request(urllib.request.Request(f"{self.base_url}/manifest"))
        return body.decode("utf-8")


class _Handler(http.server.BaseHTTPRequestHandler):
    endpoint: ChoreoEndpoint
    clock = None

    def log_message(self, fmt, *args):
        log.debug("store http: " + fmt, *args)

    def _send(self, status: int, body: bytes, headers: Optional[dict] = None) -> None:
        self.send_response(status)
        self.send_header("Content-Length", str(len(body)))
        for k, v in (headers or {}).items():
            self.send_header(k, v)
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        store = self.endpoint.store
        try:
            if self.path == "/manifest":
                self._send(200, store.manifest().encode("utf-8"))
                return
            if not self.path.startswith("/objects/"):
                self._send(404, b"not found")
                return
            name = self.path[len("/objects/"):]
            if name in ("latest", LATEST_ALIAS):
                octets, revision = store.fetch_latest()
            else:
                obj = store.get(name)
                octets, revision = obj.octets, obj.revision
            self._send(200, octets, {"X-Revision": str(revision)})
        except StoreError as exc:
            self._send(exc.status, str(exc).encode("utf-8"))

    def do_PUT(self):
        if not self.path.startswith("/objects/"):
            self._send(404, b"not found")
            return
        path = self.path[len("/objects/"):]
        octets = self.rfile.read(int(self.headers.get("Content-Length", "0")))
        try:
            ts = int(self.headers.get(HDR_TIMESTAMP, ""))
            revision = self.endpoint.put(
                path,
                octets,
                self.headers.get(HDR_SIGNATURE, ""),
                self.headers.get(HDR_NONCE, ""),
                ts,
                self.clock() if self.clock else ts,
                self.headers.get(HDR_APP_KEY),
                self.headers.get(HDR_TOKEN_KEY),
            )
        except StoreError as exc:
            self._send(exc.status, str(exc).encode("utf-8"))
            return
        except ValueError as exc:
            self._send(400, str(exc).encode("utf-8"))
            return
        self._send(200, f"{revision}\n".encode("ascii"), {"X-Revision": str(revision)})


def make_server(endpoint: ChoreoEndpoint, host: str = "127.0.0.1", port: int = 0, clock=None):
    """Threaded HTTP front end; the caller runs ``serve_forever``. ``clock``
    (ms) drives quota periods; by default the request timestamp does."""
    handler = type("StoreHandler", (_Handler,), {"endpoint": endpoint, "clock": staticmethod(clock) if clock else None})
    return http.server.ThreadingHTTPServer((host, port), handler)
