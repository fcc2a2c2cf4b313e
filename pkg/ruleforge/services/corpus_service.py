"""
Corpus ingestion: unpack package archives, pull metadata out of them without
running any package code, and drop byte-duplicate packages.
"""
import hashlib
import json
import re
import tarfile
import zipfile
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from email.parser import Parser as HeaderParser
from pathlib import Path, PurePosixPath
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import backoff
import httpx
from loguru import logger
from packaging.requirements import InvalidRequirement, Requirement

from ruleforge.services.errors import (
    CorruptArchive,
    NoMetadataFound,
    PathTraversal,
    RuleForgeError,
    UnsupportedFormat,
)
from ruleforge.services.models import (
    Ecosystem,
    Label,
    MetadataSource,
    PackageArchive,
    PackageMetadata,
    PackageRecord,
    SourceFile,
)

MAX_MEMBER_BYTES = 50 * 1024 * 1024
MAX_ARCHIVE_BYTES = 500 * 1024 * 1024

SUPPORTED_SUFFIXES = (".tar.gz", ".tgz", ".zip", ".whl")
INSTALL_SCRIPTS = {"setup.py", "setup.cfg", "pyproject.toml", "package.json"}

_SETUP_STRING_KWARGS = {
    "name": "name",
    "version": "version",
    "description": "description",
    "author": "author",
    "author_email": "author_email",
    "url": "url",
    "download_url": "download_url",
}
_STRING_LITERAL = r"""(?P<q>['"])(?P<value>(?:\\.|(?!(?P=q)).)*)(?P=q)"""


def archive_stem(path: str) -> str:
    name = Path(path).name
    for suffix in SUPPORTED_SUFFIXES:
        if name.lower().endswith(suffix):
            return name[: -len(suffix)]
    return Path(path).stem


def _archive_kind(path: str) -> str:
    lower = path.lower()
    if lower.endswith((".tar.gz", ".tgz")):
        return "tar"
    if lower.endswith((".zip", ".whl")):
        return "zip"
    raise UnsupportedFormat(f"unsupported archive format: {Path(path).name}")


def _safe_member_path(name: str) -> Optional[str]:
    """Normalize an archive member name, rejecting anything that escapes the root."""
    normalized = name.replace("\\", "/")
    if normalized.startswith("/") or re.match(r"^[A-Za-z]:", normalized):
        raise PathTraversal(f"absolute member path: {name}")
    parts = [p for p in PurePosixPath(normalized).parts if p not in ("", ".")]
    if ".." in parts:
        raise PathTraversal(f"member path escapes archive root: {name}")
    if not parts:
        return None
    return "/".join(parts)


class _SizeBudget:
    """Running uncompressed total for one archive."""

    def __init__(self, archive: str, limit: int):
        self.archive = archive
        self.limit = limit
        self.used = 0

    def take(self, name: str, size: int) -> None:
        self.used += size
        if self.used > self.limit:
            raise CorruptArchive(f"{self.archive} exceeds {self.limit} bytes uncompressed at {name}")


def _read_capped(handle, name: str, limit: int, budget: _SizeBudget) -> bytes:
    data = handle.read(limit + 1)
    if len(data) > limit:
        raise CorruptArchive(f"member {name} exceeds {limit} bytes uncompressed")
    budget.take(name, len(data))
    return data


def _read_tar_members(path: str, max_member_bytes: int = MAX_MEMBER_BYTES,
                      max_archive_bytes: int = MAX_ARCHIVE_BYTES) -> List[Tuple[str, bytes]]:
    members: List[Tuple[str, bytes]] = []
    budget = _SizeBudget(Path(path).name, max_archive_bytes)
    try:
        with tarfile.open(path, "r:gz") as tar:
            for member in tar.getmembers():
                relative = _safe_member_path(member.name)
                if relative is None or member.isdir():
                    continue
                if member.issym() or member.islnk():
                    logger.warning(f"⚠️  Skipping link member {member.name} in {Path(path).name}")
                    continue
                if not member.isfile():
                    continue
                if member.size > max_member_bytes:
                    raise CorruptArchive(f"member {member.name} exceeds {max_member_bytes} bytes uncompressed")
                handle = tar.extractfile(member)
                if handle is None:
                    continue
                members.append((relative, _read_capped(handle, member.name, max_member_bytes, budget)))
    except (tarfile.TarError, EOFError, zlib.error, OSError) as exc:
        raise CorruptArchive(f"cannot read {Path(path).name}: {exc}") from exc
    return members


def _read_zip_members(path: str, max_member_bytes: int = MAX_MEMBER_BYTES,
                      max_archive_bytes: int = MAX_ARCHIVE_BYTES) -> List[Tuple[str, bytes]]:
    members: List[Tuple[str, bytes]] = []
    budget = _SizeBudget(Path(path).name, max_archive_bytes)
    try:
        with zipfile.ZipFile(path) as archive:
            for info in archive.infolist():
                relative = _safe_member_path(info.filename)
                if relative is None or info.is_dir():
                    continue
                if info.file_size > max_member_bytes:
                    raise CorruptArchive(f"member {info.filename} exceeds {max_member_bytes} bytes uncompressed")
                # file_size comes from the central directory; the read is capped as well
                with archive.open(info) as handle:
                    members.append((relative, _read_capped(handle, info.filename, max_member_bytes, budget)))
    except (zipfile.BadZipFile, zlib.error, EOFError, OSError) as exc:
        raise CorruptArchive(f"cannot read {Path(path).name}: {exc}") from exc
    return members


def compute_signature(files: Iterable[SourceFile]) -> str:
    """
    Digest over the sorted source-file digests.

    Identical file contents give identical signatures no matter how files
    are named or ordered in the archive.
    """
    digests = sorted(f.digest for f in files)
    return hashlib.sha256("\n".join(digests).encode("ascii")).hexdigest()


def _is_metadata_document(relative: str) -> bool:
    parts = relative.split("/")
    if parts[-1] == "PKG-INFO":
        return True
    return parts[-1] == "METADATA" and len(parts) >= 2 and parts[-2].endswith(".dist-info")


def guess_package_name(stem: str) -> str:
    """``reqests-0.0.0`` -> ``reqests``"""
    return re.sub(r"-\d[\w.]*$", "", stem) or stem


def _is_source_file(relative: str, ecosystem: Ecosystem) -> bool:
    name = relative.rsplit("/", 1)[-1]
    return name in INSTALL_SCRIPTS or name.lower().endswith(ecosystem.source_extension)


def unpack_package(archive: PackageArchive, dest: Path, max_member_bytes: int = MAX_MEMBER_BYTES,
                   max_archive_bytes: int = MAX_ARCHIVE_BYTES) -> PackageRecord:
    """
    Extract an archive into ``dest`` and build its record.

    Members are validated before anything is written, so a hostile archive
    leaves ``dest`` untouched.

    Args:
        archive: Package archive to unpack
        dest: Extraction directory (created if missing)
        max_member_bytes: Largest uncompressed member accepted
        max_archive_bytes: Largest uncompressed archive total accepted

    Returns:
        PackageRecord with source files, signature and archive-name metadata
    """
    kind = _archive_kind(archive.path)
    if not Path(archive.path).is_file():
        raise CorruptArchive(f"archive not found: {archive.path}")

    reader = _read_tar_members if kind == "tar" else _read_zip_members
    members = reader(archive.path, max_member_bytes, max_archive_bytes)

    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    root = dest.resolve()
    files: List[SourceFile] = []
    documents: List[SourceFile] = []
    for relative, data in members:
        target = (root / relative).resolve()
        if root != target and root not in target.parents:
            raise PathTraversal(f"member resolves outside destination: {relative}")
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(data)
        if _is_source_file(relative, archive.ecosystem):
            files.append(SourceFile.from_bytes(relative, data))
        elif _is_metadata_document(relative):
            documents.append(SourceFile.from_bytes(relative, data))

    files.sort(key=lambda f: f.relative_path)
    documents.sort(key=lambda f: (f.relative_path.count("/"), f.relative_path))

    return PackageRecord(
        metadata=PackageMetadata(name=archive_stem(archive.path), source=MetadataSource.ARCHIVE_NAME),
        files=tuple(files),
        signature=compute_signature(files),
        label=archive.label,
        ecosystem=archive.ecosystem,
        archive=str(archive.path),
        root=str(dest),
        metadata_documents=tuple(documents),
    )


# ---------------------------------------------------------------------------
# metadata

def _parse_requirement(text: str) -> Optional[Tuple[str, str]]:
    text = text.strip()
    if not text or text.startswith("#"):
        return None
    try:
        requirement = Requirement(text)
        return requirement.name, str(requirement.specifier)
    except InvalidRequirement:
        match = re.match(r"[A-Za-z0-9][A-Za-z0-9._-]*", text)
        if not match:
            return None
        return match.group(0), text[match.end():].strip()


def _clean(value: Optional[str]) -> str:
    value = (value or "").strip()
    return "" if value.upper() == "UNKNOWN" else value


def parse_pkg_info(document: SourceFile) -> Optional[PackageMetadata]:
    """Parse an RFC-822 style PKG-INFO / METADATA document."""
    message = HeaderParser().parsestr(document.content, headersonly=True)
    name = _clean(message.get("Name"))
    if not name:
        return None

    dependencies = []
    for raw in message.get_all("Requires-Dist") or []:
        parsed = _parse_requirement(raw.split(";", 1)[0])
        if parsed:
            dependencies.append(parsed)

    urls = [_clean(message.get(key)) for key in ("Home-page", "Download-URL")]
    for project_url in message.get_all("Project-URL") or []:
        urls.append(project_url.split(",", 1)[-1].strip())

    source = MetadataSource.EGG_INFO if ".egg-info/" in document.relative_path else MetadataSource.PKG_INFO
    return PackageMetadata(
        name=name,
        version=_clean(message.get("Version")),
        description=_clean(message.get("Summary")),
        author=_clean(message.get("Author")),
        author_email=_clean(message.get("Author-email")),
        dependencies=tuple(dependencies),
        urls=tuple(u for u in urls if u),
        source=source,
    )


def parse_setup_py(content: str) -> Optional[PackageMetadata]:
    """
    Pull literal keyword arguments out of a ``setup(...)`` call.

    The file is only read as text; non-literal values (variables, calls)
    leave the field empty.
    """
    call = re.search(r"\bsetup\s*\(", content)
    if call is None:
        return None
    body = content[call.end():]

    values: Dict[str, str] = {}
    for keyword, field_name in _SETUP_STRING_KWARGS.items():
        match = re.search(rf"\b{keyword}\s*=\s*{_STRING_LITERAL}", body, re.DOTALL)
        if match:
            values[field_name] = match.group("value").strip()

    dependencies = []
    requires = re.search(r"\binstall_requires\s*=\s*\[(.*?)\]", body, re.DOTALL)
    if requires:
        for literal in re.finditer(_STRING_LITERAL, requires.group(1)):
            parsed = _parse_requirement(literal.group("value"))
            if parsed:
                dependencies.append(parsed)

    name = values.get("name", "")
    if not name:
        return None
    urls = tuple(values[k] for k in ("url", "download_url") if values.get(k))
    return PackageMetadata(
        name=name,
        version=values.get("version", ""),
        description=values.get("description", ""),
        author=values.get("author", ""),
        author_email=values.get("author_email", ""),
        dependencies=tuple(dependencies),
        urls=urls,
        source=MetadataSource.SETUP_FILE,
    )


def parse_package_json(content: str) -> Optional[PackageMetadata]:
    try:
        data = json.loads(content)
    except json.JSONDecodeError:
        return None
    if not isinstance(data, dict) or not isinstance(data.get("name"), str) or not data["name"]:
        return None

    author = data.get("author", "")
    author_email = ""
    if isinstance(author, dict):
        author_email = str(author.get("email", ""))
        author = str(author.get("name", ""))

    deps = data.get("dependencies") or {}
    dependencies = tuple((str(k), str(v)) for k, v in sorted(deps.items()) if k) if isinstance(deps, dict) else ()

    urls = []
    if isinstance(data.get("homepage"), str):
        urls.append(data["homepage"])
    repository = data.get("repository")
    if isinstance(repository, dict) and isinstance(repository.get("url"), str):
        urls.append(repository["url"])
    elif isinstance(repository, str):
        urls.append(repository)

    return PackageMetadata(
        name=data["name"],
        version=str(data.get("version", "")),
        description=str(data.get("description", "")),
        author=str(author),
        author_email=author_email,
        dependencies=dependencies,
        urls=tuple(urls),
        source=MetadataSource.SETUP_FILE,
    )


def parse_registry_payload(payload: Dict[str, Any], ecosystem: Ecosystem) -> Optional[PackageMetadata]:
    if ecosystem is Ecosystem.PYPI:
        info = payload.get("info") or {}
        name = info.get("name") or ""
        if not name:
            return None
        dependencies = []
        for raw in info.get("requires_dist") or []:
            parsed = _parse_requirement(raw.split(";", 1)[0])
            if parsed:
                dependencies.append(parsed)
        urls = [info.get("home_page") or ""] + list((info.get("project_urls") or {}).values())
        return PackageMetadata(
            name=name,
            version=info.get("version") or "",
            description=_clean(info.get("summary")),
            author=info.get("author") or "",
            author_email=info.get("author_email") or "",
            dependencies=tuple(dependencies),
            urls=tuple(u for u in urls if u),
            source=MetadataSource.REGISTRY_API,
        )

    name = payload.get("name") or ""
    if not name:
        return None
    latest = (payload.get("dist-tags") or {}).get("latest", "")
    version_info = (payload.get("versions") or {}).get(latest, {})
    deps = version_info.get("dependencies") or {}
    return PackageMetadata(
        name=name,
        version=latest,
        description=payload.get("description") or "",
        author=((payload.get("author") or {}).get("name", "") if isinstance(payload.get("author"), dict) else ""),
        dependencies=tuple((k, str(v)) for k, v in sorted(deps.items())),
        urls=tuple(u for u in [payload.get("homepage") or ""] if u),
        source=MetadataSource.REGISTRY_API,
    )


class RegistryClient:
    """Fetches package metadata JSON from the ecosystem registry."""

    def __init__(
        self,
        endpoints: Dict[str, str],
        timeout: float = 10.0,
        transport: Optional[httpx.BaseTransport] = None,
    ):
        self.endpoints = endpoints
        self.http_client = httpx.Client(timeout=timeout, transport=transport)

    @backoff.on_exception(backoff.expo, httpx.TransportError, max_tries=3)
    def _get(self, url: str) -> httpx.Response:
        return self.http_client.get(url)

    def fetch(self, package_name: str, ecosystem: Ecosystem) -> Optional[Dict[str, Any]]:
        template = self.endpoints.get(ecosystem.value)
        if not template:
            return None
        url = template.format(package_name=package_name)
        try:
            response = self._get(url)
        except httpx.HTTPError as exc:
            logger.warning(f"⚠️  Registry lookup failed for {package_name}: {exc}")
            return None
        if response.status_code != 200:
            logger.warning(f"⚠️  Registry returned {response.status_code} for {package_name}")
            return None
        try:
            return response.json()
        except ValueError:
            return None

    def close(self) -> None:
        self.http_client.close()


def extract_metadata(
    record: PackageRecord,
    allow_network: bool = False,
    registry: Optional[RegistryClient] = None,
) -> PackageMetadata:
    """
    Recover package metadata without executing anything from the package.

    Tries PKG-INFO / egg-info documents, then static parsing of the install
    script, then (only with ``allow_network``) the registry API. The first
    method yielding a name wins.

    Raises:
        NoMetadataFound: every method came back empty; ``fallback`` holds
            metadata named after the archive
    """
    for document in record.metadata_documents:
        metadata = parse_pkg_info(document)
        if metadata is not None:
            return metadata

    install_scripts = sorted(
        (f for f in record.files if f.relative_path.rsplit("/", 1)[-1] in ("setup.py", "package.json")),
        key=lambda f: (f.relative_path.count("/"), f.relative_path),
    )
    for script in install_scripts:
        if script.relative_path.endswith("setup.py"):
            metadata = parse_setup_py(script.content)
        else:
            metadata = parse_package_json(script.content)
        if metadata is not None:
            return metadata

    if allow_network and registry is not None:
        payload = registry.fetch(guess_package_name(record.metadata.name), record.ecosystem)
        if payload:
            metadata = parse_registry_payload(payload, record.ecosystem)
            if metadata is not None:
                return metadata

    fallback = PackageMetadata(
        name=archive_stem(record.archive) if record.archive else record.metadata.name,
        source=MetadataSource.ARCHIVE_NAME,
    )
    raise NoMetadataFound(f"no metadata found for {fallback.name}", fallback=fallback)


def dedup_corpus(records: Sequence[PackageRecord]) -> List[PackageRecord]:
    """
    Keep one record per signature.

    The survivor of each group is the lexicographically smallest package
    name; survivors keep their input order.
    """
    winners: Dict[str, PackageRecord] = {}
    for record in records:
        current = winners.get(record.signature)
        if current is None or (record.name, record.archive) < (current.name, current.archive):
            winners[record.signature] = record
    keep = {id(r) for r in winners.values()}
    return [r for r in records if id(r) in keep]


# ---------------------------------------------------------------------------
# corpus-level helpers

def discover_archives(directory: Path, label: Label, ecosystem: Ecosystem) -> List[PackageArchive]:
    directory = Path(directory)
    if not directory.is_dir():
        logger.warning(f"⚠️  Corpus directory missing: {directory}")
        return []
    found = [
        PackageArchive(str(p), ecosystem, label)
        for p in directory.rglob("*")
        if p.is_file() and p.name.lower().endswith(SUPPORTED_SUFFIXES)
    ]
    return sorted(found, key=lambda a: a.path)


def load_corpus(
    archives: Sequence[PackageArchive],
    workdir: Path,
    allow_network: bool = False,
    jobs: int = 4,
    registry: Optional[RegistryClient] = None,
    max_member_bytes: int = MAX_MEMBER_BYTES,
    max_archive_bytes: int = MAX_ARCHIVE_BYTES,
) -> Tuple[List[PackageRecord], List[Dict[str, str]]]:
    """
    Unpack and describe every archive; hostile or broken archives are skipped.

    Each archive gets its own directory, prefixed with its position in
    ``archives`` so equal file names from different folders never share one.

    Returns:
        (records in archive order, dropped archives with their error codes)
    """
    workdir = Path(workdir)

    def _load(indexed: Tuple[int, PackageArchive]):
        index, archive = indexed
        dest = workdir / archive.label.value / f"{index:04d}-{archive_stem(archive.path)}"
        try:
            record = unpack_package(archive, dest, max_member_bytes, max_archive_bytes)
        except RuleForgeError as exc:
            return None, {"archive": Path(archive.path).name, "error": exc.code, "message": str(exc)}
        try:
            metadata = extract_metadata(record, allow_network, registry)
        except NoMetadataFound as exc:
            logger.warning(f"⚠️  {exc}; using archive name")
            metadata = exc.fallback
        return replace(record, metadata=metadata), None

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        results = list(pool.map(_load, enumerate(archives)))

    records = [r for r, _ in results if r is not None]
    dropped = [d for _, d in results if d is not None]
    for item in dropped:
        logger.warning(f"⚠️  Dropped {item['archive']}: {item['error']} ({item['message']})")
    return records, dropped


def records_to_json(records: Sequence[PackageRecord], base: Path) -> List[Dict[str, Any]]:
    base = Path(base).resolve()
    out = []
    for record in records:
        root = Path(record.root).resolve()
        try:
            root_text = root.relative_to(base).as_posix()
        except ValueError:
            root_text = str(root)
        out.append({
            "name": record.name,
            "label": record.label.value,
            "ecosystem": record.ecosystem.value,
            "signature": record.signature,
            "archive": Path(record.archive).name,
            "root": root_text,
            "metadata": record.metadata.to_dict(),
            "files": [f.relative_path for f in record.files],
            "metadata_documents": [d.relative_path for d in record.metadata_documents],
        })
    return out


def records_from_json(entries: Sequence[Dict[str, Any]], base: Path) -> List[PackageRecord]:
    """Rebuild records written by :func:`records_to_json`, re-reading file bytes from disk."""
    records = []
    for entry in entries:
        root = Path(base) / entry["root"]
        files = tuple(SourceFile.from_bytes(p, (root / p).read_bytes()) for p in entry["files"])
        documents = tuple(
            SourceFile.from_bytes(p, (root / p).read_bytes()) for p in entry.get("metadata_documents", [])
        )
        records.append(PackageRecord(
            metadata=PackageMetadata.from_dict(entry["metadata"]),
            files=files,
            signature=entry["signature"],
            label=Label(entry["label"]),
            ecosystem=Ecosystem(entry["ecosystem"]),
            archive=entry.get("archive", ""),
            root=str(root),
            metadata_documents=documents,
        ))
    return records
