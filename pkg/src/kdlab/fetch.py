"""Dataset download with pinned digests, retries and quarantine.

MNIST files are pinned by the SHA-256 of their decompressed IDX content, so
a raw or re-compressed copy verifies equally. Fashion-MNIST and CIFAR-10 are
pinned by the MD5 of the published archives, the only digests their
maintainers publish.
"""

from __future__ import annotations

import gzip
import hashlib
import logging
import shutil
import tarfile
import time
import urllib.request
from dataclasses import dataclass
from pathlib import Path

from .errors import ChecksumError, ConfigError, DataError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RemoteFile:
    name: str  # file name on the mirror and on disk
    digest: str
    algo: str = "sha256"  # sha256 | md5
    decompressed: bool = False  # digest covers the gunzipped content


MIRRORS = {
    "mnist": (
        "https://ossci-datasets.s3.amazonaws.com/mnist/",
        "https://storage.googleapis.com/cvdf-datasets/mnist/",
    ),
    "fashion-mnist": ("http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/",),
    "cifar10": ("https://www.cs.toronto.edu/~kriz/",),
}

FILES = {
    "mnist": (
        RemoteFile("train-images-idx3-ubyte.gz",
                   "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db", decompressed=True),
        RemoteFile("train-labels-idx1-ubyte.gz",
                   "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5", decompressed=True),
        RemoteFile("t10k-images-idx3-ubyte.gz",
                   "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7", decompressed=True),
        RemoteFile("t10k-labels-idx1-ubyte.gz",
                   "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2", decompressed=True),
    ),
    "fashion-mnist": (
        RemoteFile("train-images-idx3-ubyte.gz", "8d4fb7e6c68d591d4c3dfef9ec88bf0d", "md5"),
        RemoteFile("train-labels-idx1-ubyte.gz", "25c81989df183df01b3e8a0aad5dffbe", "md5"),
        RemoteFile("t10k-images-idx3-ubyte.gz", "bef4ecab320f06d8554ea6380940ec79", "md5"),
        RemoteFile("t10k-labels-idx1-ubyte.gz", "bb300cfdad3c16e7a12a480ee83cd310", "md5"),
    ),
    "cifar10": (RemoteFile("cifar-10-binary.tar.gz", "c32a1d4ab5d03f1284b67883e8d87530", "md5"),),
}

DATASET_IDS = tuple(FILES)


def file_digest(path, algo="sha256", decompressed=False):
    h = hashlib.new(algo)
    opener = gzip.open if decompressed and str(path).endswith(".gz") else open
    with opener(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def verify(path, rf: RemoteFile) -> bool:
    try:
        return file_digest(path, rf.algo, rf.decompressed) == rf.digest
    except (OSError, EOFError, gzip.BadGzipFile):
        return False


def quarantine(path) -> Path:
    """Move a bad file into ``<dir>/.quarantine/`` and return its new path."""
    path = Path(path)
    qdir = path.parent / ".quarantine"
    qdir.mkdir(exist_ok=True)
    dest = qdir / f"{path.name}.{int(time.time() * 1000)}"
    shutil.move(str(path), dest)
    return dest


def _download(url, dest: Path, retries, backoff, timeout):
    tmp = dest.with_name(dest.name + ".part")
    last = None
    for attempt in range(retries + 1):
        try:
            with urllib.request.urlopen(url, timeout=timeout) as resp, open(tmp, "wb") as f:
                shutil.copyfileobj(resp, f)
            tmp.replace(dest)
            return
        except OSError as exc:
            last = exc
            log.warning("download %s failed (attempt %d/%d): %s", url, attempt + 1, retries + 1, exc)
            if attempt < retries and backoff:
                time.sleep(backoff * 2 ** attempt)
    tmp.unlink(missing_ok=True)
    raise last


def fetch_dataset(dataset_id, directory, mirrors=None, retries=2, backoff=1.0, timeout=60.0, files=None):
    """Download and verify every file of ``dataset_id`` into ``directory``.

    Verified files already present are left alone. A present file that fails
    verification is quarantined and reported with :class:`ChecksumError`.
    Returns a dict ``{"downloaded": [...], "skipped": [...]}`` of file names.
    """
    if files is None:
        if dataset_id not in FILES:
            raise ConfigError("dataset", f"unknown id {dataset_id!r}; valid ids: {', '.join(DATASET_IDS)}")
        files = FILES[dataset_id]
    mirrors = tuple(mirrors or MIRRORS.get(dataset_id, ()))
    if not mirrors:
        raise ConfigError("mirrors", "no mirror URL configured")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    report = {"downloaded": [], "skipped": []}
    for rf in files:
        dest = directory / rf.name
        if dest.exists():
            if verify(dest, rf):
                report["skipped"].append(rf.name)
                continue
            moved = quarantine(dest)
            raise ChecksumError(f"{dest}: {rf.algo} mismatch; moved to {moved}")
        errors, bad = [], False
        for base in mirrors:
            url = base.rstrip("/") + "/" + rf.name
            try:
                _download(url, dest, retries, backoff, timeout)
            except OSError as exc:
                errors.append(f"{url}: {exc}")
                continue
            if verify(dest, rf):
                break
            bad = True
            errors.append(f"{url}: {rf.algo} mismatch; moved to {quarantine(dest)}")
        else:
            cls = ChecksumError if bad else DataError
            raise cls(f"could not fetch {rf.name}: " + "; ".join(errors))
        report["downloaded"].append(rf.name)
    if dataset_id == "cifar10" and report["downloaded"]:
        with tarfile.open(directory / FILES["cifar10"][0].name) as tar:
            tar.extractall(directory, filter="data")
    return report
