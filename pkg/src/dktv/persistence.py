"""Files a run leaves behind: the run manifest, snapshots and CSV tables.

All floats are written with 17 significant digits, which round-trips
IEEE doubles exactly and makes reruns byte-identical.
"""

from __future__ import annotations

import hashlib
import importlib
import io
import json
import logging
import os
import typing
from collections import UserDict
from collections.abc import Sequence
from pathlib import Path
from types import TracebackType

import numpy as np
from typing_extensions import Self

from dktv import SnapshotError
from dktv.core import DataBatch, DkrSnapshot, EpochRecord
from dktv.observable import ObservableNet
from dktv.regression import KoopmanMatrices

log: logging.Logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"


def _flock_exclusive(fileobj: io.TextIOWrapper) -> None:
    if os.name == "posix":
        fcntl = importlib.import_module("fcntl")
        fcntl.flock(fileobj, fcntl.LOCK_EX)
    if os.name == "nt":
        msvcrt = importlib.import_module("msvcrt")
        msvcrt.locking(fileobj.fileno(), msvcrt.LK_LOCK, 2147483647)


class RunManifest(UserDict[str, typing.Any]):
    """JSON record of a run: configuration, seeds, data hashes and verdicts.

    The file is locked exclusively while open, so concurrent runs writing
    into the same output directory are serialized. Changes reach the file
    on :meth:`commit`; used as a context manager the manifest commits when
    the block exits without an exception.

    :param path: File to keep the manifest in.
    """

    path: str
    fobj: typing.Optional[io.TextIOWrapper]

    def __init__(self, path: typing.Union[str, Path]) -> None:
        super().__init__()
        self.path = str(path)
        self.fobj = None

    def __enter__(self) -> Self:
        return self.open()

    def __exit__(
        self,
        exc_type: typing.Optional[type[BaseException]],
        exc_value: typing.Optional[BaseException],
        traceback: typing.Optional[TracebackType],
    ) -> None:
        if not exc_type:
            self.commit()
        self.close()

    def open(self) -> Self:
        """Read or create the manifest file and lock it.

        :raises SnapshotError: If the file does not hold a JSON object. The
            file is truncated first so the next run starts clean.
        """
        self.fobj = self._create_fobj()
        _flock_exclusive(self.fobj)
        if os.fstat(self.fobj.fileno()).st_size:
            try:
                self.data = self._load()
            except ValueError as e:
                self.fobj.truncate(0)
                raise SnapshotError(f"damaged run manifest {self.path}: {e}") from e
        return self

    def _create_fobj(self) -> io.TextIOWrapper:
        Path(self.path).parent.mkdir(parents=True, exist_ok=True)
        try:
            return open(self.path, "r+", encoding="utf-8")
        except IOError:
            return open(self.path, "w+", encoding="utf-8")

    def _load(self) -> dict[str, typing.Any]:
        if not self.fobj:
            raise RuntimeError("file object is none")
        self.fobj.seek(0)
        data = json.load(self.fobj)
        if not isinstance(data, dict):
            raise ValueError("the manifest does not contain an object")
        return typing.cast(dict[str, typing.Any], data)

    def close(self) -> None:
        if not self.fobj:
            return
        self.fobj.close()
        self.fobj = None

    def commit(self) -> None:
        if not self.fobj:
            raise IOError("cannot commit a closed manifest", self.path)
        self.fobj.seek(0)
        self.fobj.truncate()
        json.dump(self.data, self.fobj, indent=2, sort_keys=True, default=_json_default)
        self.fobj.write("\n")
        self.fobj.flush()
        os.fsync(self.fobj.fileno())


def _json_default(value: typing.Any) -> typing.Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, (tuple, set)):
        return list(value)
    raise TypeError(f"cannot serialize {type(value).__name__}")


def write_json(path: typing.Union[str, Path], data: typing.Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(data, indent=2, sort_keys=True, default=_json_default) + "\n",
        encoding="utf-8",
    )
    return path


def data_hash(array: np.ndarray) -> str:
    """SHA-256 over the shape and the float64 bytes of ``array``."""
    array = np.ascontiguousarray(array, dtype=np.float64)
    digest = hashlib.sha256(repr(array.shape).encode("ascii"))
    digest.update(array.tobytes())
    return digest.hexdigest()


# CSV ########################################################################


def write_matrix_csv(path: typing.Union[str, Path], M: np.ndarray) -> Path:
    """Row-major matrix behind a ``# rows=R cols=C`` header.

    Matrices without columns keep the header only.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="ascii", newline="\n") as f:
        f.write(f"# rows={M.shape[0]} cols={M.shape[1]}\n")
        if M.size:
            np.savetxt(f, M, fmt=FLOAT_FORMAT, delimiter=",")
    return path


def read_matrix_csv(path: typing.Union[str, Path]) -> np.ndarray:
    """:raises SnapshotError: If the file is missing or its header is off."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="ascii").splitlines()
    except FileNotFoundError as e:
        raise SnapshotError(f"missing matrix file {path}") from e
    try:
        fields = dict(part.split("=") for part in lines[0].lstrip("# ").split())
        rows, cols = int(fields["rows"]), int(fields["cols"])
    except (IndexError, KeyError, ValueError) as e:
        raise SnapshotError(f"{path} lacks a '# rows=R cols=C' header") from e
    body = [line for line in lines[1:] if line.strip()]
    if rows * cols == 0:
        return np.zeros((rows, cols))
    M = np.array([[float(v) for v in line.split(",")] for line in body])
    if M.shape != (rows, cols):
        raise SnapshotError(f"{path} holds a {M.shape} matrix, the header says {(rows, cols)}")
    return M


def write_table_csv(
    path: typing.Union[str, Path],
    columns: Sequence[str],
    rows: typing.Union[np.ndarray, Sequence[Sequence[float]]],
) -> Path:
    """Numeric table with a header line of column names."""
    table = np.asarray(rows, dtype=float).reshape(-1, len(columns))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="ascii", newline="\n") as f:
        f.write(",".join(columns) + "\n")
        for row in table:
            f.write(",".join(FLOAT_FORMAT % v for v in row) + "\n")
    return path


def read_table_csv(path: typing.Union[str, Path]) -> tuple[list[str], np.ndarray]:
    lines = Path(path).read_text(encoding="ascii").splitlines()
    columns = lines[0].split(",")
    rows = [[float(v) for v in line.split(",")] for line in lines[1:] if line]
    return columns, np.array(rows).reshape(-1, len(columns))


# Snapshots ##################################################################


class SnapshotStore:
    """One directory per absorbed batch.

    ``batch_0003/`` holds ``manifest.json`` (dimensions, τ, ``k_τ``, β,
    training settings and the loss trace), ``A.csv``, ``B.csv``, ``C.csv``,
    the flat parameter vector ``theta.txt``, the architecture
    ``layers.json`` and the batch data ``X.csv``, ``X_bar.csv`` and ``U.csv``.
    """

    root: Path

    def __init__(self, root: typing.Union[str, Path]) -> None:
        self.root = Path(root)

    def _dir(self, tau: int) -> Path:
        return self.root / f"batch_{tau:04d}"

    def save(
        self,
        snapshot: DkrSnapshot,
        batch: DataBatch,
        settings: typing.Optional[dict[str, typing.Any]] = None,
    ) -> Path:
        directory = self._dir(snapshot.tau)
        directory.mkdir(parents=True, exist_ok=True)
        M = snapshot.matrices
        write_matrix_csv(directory / "A.csv", M.A)
        write_matrix_csv(directory / "B.csv", M.B.reshape(M.r, M.m))
        write_matrix_csv(directory / "C.csv", M.C)
        (directory / "theta.txt").write_text(
            "".join(FLOAT_FORMAT % v + "\n" for v in snapshot.theta), encoding="ascii"
        )
        write_json(directory / "layers.json", snapshot.net.to_dict())
        write_matrix_csv(directory / "X.csv", batch.X)
        write_matrix_csv(directory / "X_bar.csv", batch.X_bar)
        write_matrix_csv(directory / "U.csv", batch.U.reshape(batch.m, batch.beta))
        write_json(
            directory / "manifest.json",
            {
                "tau": snapshot.tau,
                "k_start": snapshot.k_start,
                "beta": snapshot.beta,
                "n": M.n,
                "r": M.r,
                "m": M.m,
                "diverged": snapshot.diverged,
                "train_stats": [list(record) for record in snapshot.train_stats],
                "settings": settings or {},
            },
        )
        return directory

    def taus(self) -> list[int]:
        if not self.root.is_dir():
            return []
        return sorted(
            int(p.name.removeprefix("batch_"))
            for p in self.root.glob("batch_*")
            if (p / "manifest.json").is_file()
        )

    def __len__(self) -> int:
        return len(self.taus())

    def load(self, tau: int) -> tuple[DkrSnapshot, DataBatch]:
        """:raises SnapshotError: If the snapshot of batch ``tau`` is missing or damaged."""
        directory = self._dir(tau)
        manifest_path = directory / "manifest.json"
        if not manifest_path.is_file():
            raise SnapshotError(f"no snapshot of batch {tau} in {self.root}")
        try:
            manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
            layers = json.loads((directory / "layers.json").read_text(encoding="utf-8"))
            theta = np.array(
                [float(v) for v in (directory / "theta.txt").read_text().split()]
            )
        except (OSError, ValueError) as e:
            raise SnapshotError(f"damaged snapshot in {directory}: {e}") from e
        n, r, m = manifest["n"], manifest["r"], manifest["m"]
        matrices = KoopmanMatrices(
            read_matrix_csv(directory / "A.csv"),
            read_matrix_csv(directory / "B.csv").reshape(r, m),
            read_matrix_csv(directory / "C.csv"),
        )
        snapshot = DkrSnapshot(
            net=ObservableNet.from_dict(layers, theta),
            matrices=matrices,
            tau=manifest["tau"],
            k_start=manifest["k_start"],
            beta=manifest["beta"],
            train_stats=tuple(EpochRecord(*record) for record in manifest["train_stats"]),
            diverged=manifest["diverged"],
        )
        batch = DataBatch(
            tau=manifest["tau"],
            k_start=manifest["k_start"],
            X=read_matrix_csv(directory / "X.csv").reshape(n, -1),
            X_bar=read_matrix_csv(directory / "X_bar.csv").reshape(n, -1),
            U=read_matrix_csv(directory / "U.csv").reshape(m, manifest["beta"]),
        )
        return snapshot, batch

    def load_all(self) -> tuple[list[DkrSnapshot], list[DataBatch]]:
        """:raises SnapshotError: If the store is empty or has gaps."""
        taus = self.taus()
        if not taus:
            raise SnapshotError(f"no snapshots in {self.root}")
        if taus != list(range(len(taus))):
            raise SnapshotError(f"snapshots in {self.root} are not consecutive: {taus}")
        pairs = [self.load(tau) for tau in taus]
        log.info("loaded %d snapshots from %s", len(pairs), self.root)
        return [s for s, _ in pairs], [b for _, b in pairs]
