import json

import httpx
import pytest

from ruleforge.services.corpus_service import (
    RegistryClient,
    archive_stem,
    dedup_corpus,
    discover_archives,
    extract_metadata,
    guess_package_name,
    load_corpus,
    parse_package_json,
    parse_pkg_info,
    parse_setup_py,
    records_from_json,
    records_to_json,
    unpack_package,
)
from ruleforge.services.errors import CorruptArchive, NoMetadataFound, PathTraversal, UnsupportedFormat
from ruleforge.services.models import Ecosystem, Label, MetadataSource, PackageArchive, SourceFile
from ruleforge.tests.corpus_builder import build_dedup_corpus, sdist_members, stealer_source, write_tar_gz, write_zip


def _archive(path, label=Label.MALICIOUS):
    return PackageArchive(str(path), Ecosystem.PYPI, label)


def test_archive_stem_and_name_guess():
    assert archive_stem("/x/reqeusts-0.0.0.tar.gz") == "reqeusts-0.0.0"
    assert archive_stem("pkg-1.0-py3-none-any.whl") == "pkg-1.0-py3-none-any"
    assert guess_package_name("reqeusts-0.0.0") == "reqeusts"
    assert guess_package_name("plainname") == "plainname"


def test_unpack_keeps_sources_and_metadata_documents(tmp_path):
    archive = write_tar_gz(tmp_path / "hostinfo-1-0.0.1.tar.gz",
                           sdist_members("hostinfo-1", "0.0.1", stealer_source(0)))
    record = unpack_package(_archive(archive), tmp_path / "out")

    paths = [f.relative_path for f in record.files]
    assert paths == ["hostinfo-1-0.0.1/hostinfo_1/__init__.py", "hostinfo-1-0.0.1/setup.py"]
    assert [d.relative_path for d in record.metadata_documents] == ["hostinfo-1-0.0.1/PKG-INFO"]
    assert (tmp_path / "out" / "hostinfo-1-0.0.1" / "setup.py").is_file()
    assert record.metadata.source is MetadataSource.ARCHIVE_NAME


def test_signature_ignores_member_order_and_names(tmp_path):
    source = stealer_source(0).encode("utf-8")
    a = write_tar_gz(tmp_path / "a-1.tar.gz", {"a/x.py": source, "a/y.py": b"print(1)\n"})
    b = write_zip(tmp_path / "b-1.zip", {"b/other.py": b"print(1)\n", "b/z.py": source})
    record_a = unpack_package(_archive(a), tmp_path / "ua")
    record_b = unpack_package(_archive(b), tmp_path / "ub")
    assert record_a.signature == record_b.signature


@pytest.mark.parametrize("member", ["../escape.py", "/etc/passwd.py", "pkg/../../up.py"])
def test_hostile_archive_is_rejected_without_writing(tmp_path, member):
    archive = write_tar_gz(tmp_path / "evil-1.tar.gz", {"pkg/ok.py": b"x = 1\n", member: b"boom\n"})
    dest = tmp_path / "dest"
    with pytest.raises(PathTraversal):
        unpack_package(_archive(archive), dest)
    assert not dest.exists() or not any(dest.rglob("*.py"))


@pytest.mark.parametrize("writer", [write_tar_gz, write_zip])
def test_oversized_archive_is_rejected_without_writing(tmp_path, writer):
    suffix = ".tar.gz" if writer is write_tar_gz else ".zip"
    bomb = writer(tmp_path / f"bomb-1{suffix}", {"pkg/ok.py": b"x = 1\n", "pkg/big.py": b"#" * 4096})
    dest = tmp_path / "dest"
    with pytest.raises(CorruptArchive, match="exceeds 1024 bytes"):
        unpack_package(_archive(bomb), dest, max_member_bytes=1024)
    assert not dest.exists()

    spread = writer(tmp_path / f"spread-1{suffix}", {f"pkg/m{i}.py": b"#" * 600 for i in range(4)})
    with pytest.raises(CorruptArchive):
        unpack_package(_archive(spread), dest, max_member_bytes=1024, max_archive_bytes=2000)
    assert not dest.exists()

    record = unpack_package(_archive(spread), dest, max_member_bytes=1024, max_archive_bytes=2400)
    assert len(record.files) == 4


def test_corrupt_and_unsupported_archives(tmp_path):
    broken = tmp_path / "broken-1.tar.gz"
    broken.write_bytes(b"not a gzip stream")
    with pytest.raises(CorruptArchive):
        unpack_package(_archive(broken), tmp_path / "b")
    with pytest.raises(UnsupportedFormat):
        unpack_package(_archive(tmp_path / "thing.rar"), tmp_path / "c")


def test_parse_pkg_info_reads_dependencies_and_urls():
    document = SourceFile.from_bytes("x/PKG-INFO", (
        "Metadata-Version: 2.1\nName: reqeusts\nVersion: 0.0.0\nSummary: UNKNOWN\n"
        "Home-page: https://example.invalid/home\n"
        "Requires-Dist: colourama>=0.1\nRequires-Dist: six; python_version < '3'\n"
    ).encode("utf-8"))
    meta = parse_pkg_info(document)
    assert meta.name == "reqeusts"
    assert meta.version == "0.0.0"
    assert meta.description == ""
    assert meta.dependencies == (("colourama", ">=0.1"), ("six", ""))
    assert meta.urls == ("https://example.invalid/home",)
    assert meta.source is MetadataSource.PKG_INFO


def test_parse_setup_py_without_running_it():
    content = (
        "import os\nos.system('echo never')\n"
        "setup(name='colorsama', version='0.1', description=\"\", author=AUTHOR,\n"
        "      install_requires=['requests>=2', \"jeIlyfish\"])\n"
    )
    meta = parse_setup_py(content)
    assert meta.name == "colorsama"
    assert meta.version == "0.1"
    assert meta.author == ""
    assert meta.dependencies == (("requests", ">=2"), ("jeIlyfish", ""))
    assert meta.source is MetadataSource.SETUP_FILE
    assert parse_setup_py("print('no setup call')") is None


def test_parse_package_json():
    meta = parse_package_json(json.dumps({
        "name": "left-pad-x", "version": "1.0.0", "author": {"name": "a", "email": "a@example.invalid"},
        "dependencies": {"zeta": "^1", "alpha": "2"},
    }))
    assert meta.dependencies == (("alpha", "2"), ("zeta", "^1"))
    assert meta.author_email == "a@example.invalid"
    assert parse_package_json("{not json") is None


def test_metadata_falls_back_to_archive_name(tmp_path):
    archive = write_tar_gz(tmp_path / "ghostpkg-0.1.tar.gz", {"ghostpkg-0.1/ghost.py": b"x = 1\n"})
    record = unpack_package(_archive(archive), tmp_path / "g")
    with pytest.raises(NoMetadataFound) as info:
        extract_metadata(record)
    assert info.value.fallback.name == "ghostpkg-0.1"
    assert info.value.fallback.source is MetadataSource.ARCHIVE_NAME


def test_registry_lookup_only_with_network_allowed(tmp_path):
    archive = write_tar_gz(tmp_path / "ghostpkg-0.1.tar.gz", {"ghostpkg-0.1/ghost.py": b"x = 1\n"})
    record = unpack_package(_archive(archive), tmp_path / "g")
    requested = []

    def handler(request: httpx.Request) -> httpx.Response:
        requested.append(str(request.url))
        return httpx.Response(200, json={"info": {
            "name": "ghostpkg", "version": "0.1", "summary": "ghost", "requires_dist": ["colourama"],
        }})

    client = RegistryClient({"pypi": "https://registry.invalid/pypi/{package_name}/json"},
                            transport=httpx.MockTransport(handler))
    meta = extract_metadata(record, allow_network=True, registry=client)
    assert requested == ["https://registry.invalid/pypi/ghostpkg/json"]
    assert meta.source is MetadataSource.REGISTRY_API
    assert meta.dependencies == (("colourama", ""),)

    with pytest.raises(NoMetadataFound):
        extract_metadata(record, allow_network=False, registry=client)
    assert len(requested) == 1
    client.close()


def test_dedup_ten_to_six_and_idempotent(tmp_path):
    folder = build_dedup_corpus(tmp_path)
    archives = discover_archives(folder, Label.LEGITIMATE, Ecosystem.PYPI)
    assert len(archives) == 10
    records, dropped = load_corpus(archives, tmp_path / "work", jobs=2)
    assert dropped == []
    assert len(records) == 10

    unique = dedup_corpus(records)
    assert len(unique) == 6
    assert dedup_corpus(unique) == unique
    assert len({r.signature for r in unique}) == 6
    # survivors are the smallest archive per signature
    assert all("mirror" not in r.archive for r in unique)


def test_load_corpus_drops_hostile_archives(tmp_path):
    folder = tmp_path / "mal"
    write_tar_gz(folder / "good-1.0.tar.gz", sdist_members("good", "1.0", "x = 1\n"))
    write_tar_gz(folder / "evil-1.0.tar.gz", {"../evil.py": b"boom\n"})
    records, dropped = load_corpus(discover_archives(folder, Label.MALICIOUS, Ecosystem.PYPI), tmp_path / "w")
    assert [r.name for r in records] == ["good"]
    assert dropped == [{"archive": "evil-1.0.tar.gz", "error": "path_traversal",
                        "message": dropped[0]["message"]}]


def test_records_survive_json(tmp_path):
    archive = write_tar_gz(tmp_path / "src" / "reqeusts-0.0.0.tar.gz",
                           sdist_members("reqeusts", "0.0.0", stealer_source(1), requires=("colourama",)))
    records, _ = load_corpus([_archive(archive)], tmp_path / "run" / "unpacked", jobs=1)
    entries = records_to_json(records, tmp_path / "run")
    assert not entries[0]["root"].startswith("/")

    restored = records_from_json(json.loads(json.dumps(entries)), tmp_path / "run")
    assert restored[0].metadata == records[0].metadata
    assert restored[0].signature == records[0].signature
    assert [f.content for f in restored[0].files] == [f.content for f in records[0].files]


def test_same_archive_name_in_two_folders(tmp_path):
    first = write_tar_gz(tmp_path / "mal" / "2023" / "hostinfo-1.0.tar.gz",
                         sdist_members("hostinfo", "1.0", stealer_source(0)))
    second = write_tar_gz(tmp_path / "mal" / "2024" / "hostinfo-1.0.tar.gz",
                          sdist_members("hostinfo", "1.0", stealer_source(3)))
    archives = discover_archives(tmp_path / "mal", Label.MALICIOUS, Ecosystem.PYPI)
    assert [a.path for a in archives] == [str(first), str(second)]

    records, dropped = load_corpus(archives, tmp_path / "run" / "unpacked", jobs=2)
    assert dropped == []
    assert len({r.root for r in records}) == 2
    assert records[0].signature != records[1].signature

    restored = records_from_json(records_to_json(records, tmp_path / "run"), tmp_path / "run")
    assert [r.signature for r in restored] == [r.signature for r in records]
    assert [f.content for f in restored[1].files] == [f.content for f in records[1].files]


def test_load_corpus_applies_size_caps(tmp_path):
    folder = tmp_path / "mal"
    write_tar_gz(folder / "good-1.0.tar.gz", sdist_members("good", "1.0", "x = 1\n"))
    write_zip(folder / "huge-1.0.zip", {"huge/big.py": b"#" * 10_000})
    records, dropped = load_corpus(discover_archives(folder, Label.MALICIOUS, Ecosystem.PYPI), tmp_path / "w",
                                   max_member_bytes=5_000)
    assert [r.name for r in records] == ["good"]
    assert [(d["archive"], d["error"]) for d in dropped] == [("huge-1.0.zip", "corrupt_archive")]
