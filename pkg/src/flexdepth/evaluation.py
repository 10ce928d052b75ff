"""Accuracy measurement across the whole depth grid.

A trained checkpoint is decoded once per (encoder depth, decoder depth)
task under that task's deterministic gates, giving a grid of sequence
and token accuracies. The same machinery pointed at an unadapted
full-depth checkpoint is the truncation probe: it shows how a normally
trained model collapses when layers are simply removed. Reports are
plain text and CSV with full-precision numbers so equal runs produce
byte-identical files.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

from flexdepth.assignment import AssignmentPlan
from flexdepth.data import pad_sources
from flexdepth.depth_space import DepthGrid
from flexdepth.model import GateVector, ModelConfig, Parameters, greedy_decode


def sequence_accuracy(predictions, references) -> float:
    """Fraction of predictions that match their reference exactly."""
    if len(predictions) != len(references):
        raise ValueError("prediction and reference counts differ")
    if not references:
        raise ValueError("empty evaluation set")
    hits = sum(1 for p, r in zip(predictions, references) if tuple(p) == tuple(r))
    return hits / len(references)


def token_accuracy(predictions, references) -> float:
    """Positionwise match fraction; length mismatches count as misses."""
    if len(predictions) != len(references):
        raise ValueError("prediction and reference counts differ")
    if not references:
        raise ValueError("empty evaluation set")
    hits = 0
    total = 0
    for p, r in zip(predictions, references):
        total += max(len(p), len(r), 1)
        hits += sum(1 for a, b in zip(p, r) if a == b)
    return hits / total


@dataclass(frozen=True)
class Cell:
    seq_acc: float | None
    tok_acc: float | None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class EvalGrid:
    """Sequence/token accuracy per (m, n) task.

    Rows are encoder depths, columns decoder depths. Cells that failed to
    decode carry an error marker instead of a number, so failures stay
    distinguishable from genuine zero accuracy.
    """

    enc_depths: tuple[int, ...]
    dec_depths: tuple[int, ...]
    cells: dict[tuple[int, int], Cell]
    checkpoint_id: str = ""
    strategy: str = ""
    dataset_id: str = ""

    def __post_init__(self) -> None:
        expect = {(m, n) for m in self.enc_depths for n in self.dec_depths}
        if set(self.cells) != expect:
            raise ValueError("cells do not cover the task grid exactly")
        for cell in self.cells.values():
            if cell.ok and not (0.0 <= cell.seq_acc <= 1.0 and 0.0 <= cell.tok_acc <= 1.0):
                raise ValueError("accuracies must lie in [0, 1]")

    def mean_seq_acc(self) -> float:
        good = [c.seq_acc for c in self.cells.values() if c.ok]
        if not good:
            raise ValueError("no successful cells")
        return sum(good) / len(good)

    def mean_tok_acc(self) -> float:
        good = [c.tok_acc for c in self.cells.values() if c.ok]
        if not good:
            raise ValueError("no successful cells")
        return sum(good) / len(good)

    def error_count(self) -> int:
        return sum(1 for c in self.cells.values() if not c.ok)


def evaluate_grid(params: Parameters, model_config: ModelConfig, grid: DepthGrid,
                  enc_plan: AssignmentPlan, dec_plan: AssignmentPlan, test_pairs,
                  checkpoint_id: str = "", dataset_id: str = "",
                  max_len: int | None = None, chunk_rows: int = 64) -> EvalGrid:
    """Greedy-decode the test set once per task under that task's gates.

    A failure inside one cell is recorded in that cell; the rest of the
    grid still evaluates.
    """
    if not test_pairs:
        raise ValueError("empty evaluation set")
    sources = [s for s, _ in test_pairs]
    references = [tuple(t) for _, t in test_pairs]
    limit = model_config.max_len if max_len is None else max_len
    cells = {}
    for m, n in grid.tasks:
        try:
            gates = GateVector.from_subnetworks(enc_plan[m], dec_plan[n])
            predictions = []
            for start in range(0, len(sources), chunk_rows):
                chunk = sources[start : start + chunk_rows]
                src, mask = pad_sources(chunk)
                predictions.extend(
                    greedy_decode(params, model_config, src, mask, gates, limit)
                )
            cells[(m, n)] = Cell(
                sequence_accuracy(predictions, references),
                token_accuracy(predictions, references),
            )
        except Exception as e:  # keep the rest of the grid alive
            cells[(m, n)] = Cell(None, None, error=f"{type(e).__name__}: {e}")
    return EvalGrid(
        grid.encoder.depths, grid.decoder.depths, cells,
        checkpoint_id=checkpoint_id, strategy=enc_plan.strategy, dataset_id=dataset_id,
    )


def vanilla_truncation_probe(pretrained: Parameters, model_config: ModelConfig,
                             grid: DepthGrid, enc_plan: AssignmentPlan,
                             dec_plan: AssignmentPlan, test_pairs,
                             dataset_id: str = "", max_len: int | None = None) -> EvalGrid:
    """Grid evaluation of a model never trained below full depth.

    Identical computation to ``evaluate_grid``; the separate name marks
    that the checkpoint had no depth adaptation, so small cells are
    expected to collapse.
    """
    return evaluate_grid(
        pretrained, model_config, grid, enc_plan, dec_plan, test_pairs,
        checkpoint_id="pretrained", dataset_id=dataset_id, max_len=max_len,
    )


@dataclass
class DeltaReport:
    """Cellwise difference between two grids (b minus a)."""

    enc_depths: tuple[int, ...]
    dec_depths: tuple[int, ...]
    deltas: dict[tuple[int, int], float | None]
    winners: dict[tuple[int, int], str]  # "a" | "b" | "tie" | "err"
    mean_a: float
    mean_b: float
    label_a: str = "a"
    label_b: str = "b"

    @property
    def wins_b(self) -> int:
        return sum(1 for w in self.winners.values() if w == "b")

    @property
    def wins_a(self) -> int:
        return sum(1 for w in self.winners.values() if w == "a")

    @property
    def ties(self) -> int:
        return sum(1 for w in self.winners.values() if w == "tie")

    @property
    def mean_delta(self) -> float:
        return self.mean_b - self.mean_a

    def winner_line(self) -> str:
        total = len(self.winners)
        return f"{self.label_b} wins {self.wins_b}/{total}, ties {self.ties}"


def delta_report(grid_a: EvalGrid, grid_b: EvalGrid,
                 label_a: str = "a", label_b: str = "b") -> DeltaReport:
    if grid_a.enc_depths != grid_b.enc_depths or grid_a.dec_depths != grid_b.dec_depths:
        raise ValueError("grid shapes differ")
    deltas = {}
    winners = {}
    for key, ca in grid_a.cells.items():
        cb = grid_b.cells[key]
        if not (ca.ok and cb.ok):
            deltas[key] = None
            winners[key] = "err"
            continue
        d = cb.seq_acc - ca.seq_acc
        deltas[key] = d
        winners[key] = "tie" if d == 0.0 else ("b" if d > 0.0 else "a")
    return DeltaReport(
        grid_a.enc_depths, grid_a.dec_depths, deltas, winners,
        grid_a.mean_seq_acc(), grid_b.mean_seq_acc(),
        label_a=label_a, label_b=label_b,
    )


# ---------------------------------------------------------------------------
# exports


def grid_to_csv(grid: EvalGrid, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["m", "n", "seq_acc", "tok_acc", "error"])
        for m in grid.enc_depths:
            for n in grid.dec_depths:
                c = grid.cells[(m, n)]
                if c.ok:
                    w.writerow([m, n, repr(c.seq_acc), repr(c.tok_acc), ""])
                else:
                    w.writerow([m, n, "", "", c.error])


def grid_from_csv(path) -> EvalGrid:
    cells = {}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or header[:2] != ["m", "n"]:
            raise ValueError(f"{path} is not a grid file")
        for row in reader:
            m, n = int(row[0]), int(row[1])
            if row[4]:
                cells[(m, n)] = Cell(None, None, error=row[4])
            else:
                cells[(m, n)] = Cell(float(row[2]), float(row[3]))
    if not cells:
        raise ValueError(f"{path} holds no cells")
    enc = tuple(sorted({m for m, _ in cells}))
    dec = tuple(sorted({n for _, n in cells}))
    return EvalGrid(enc, dec, cells)


def _table(title, dec_depths, rows) -> str:
    head = ["enc\\dec"] + [str(n) for n in dec_depths]
    table = [head] + rows
    widths = [max(len(r[i]) for r in table) for i in range(len(head))]
    lines = [title]
    for r in table:
        lines.append("  ".join(cell.rjust(w) for cell, w in zip(r, widths)))
    return "\n".join(lines) + "\n"


def grid_to_text(grid: EvalGrid) -> str:
    """Aligned heatmap table: encoder depths down, decoder depths across."""
    rows = []
    for m in grid.enc_depths:
        row = [str(m)]
        for n in grid.dec_depths:
            c = grid.cells[(m, n)]
            row.append(f"{c.seq_acc:.3f}" if c.ok else "ERR")
        rows.append(row)
    title = f"sequence accuracy ({grid.checkpoint_id or 'checkpoint'}, {grid.strategy or 'n/a'})"
    return _table(title, grid.dec_depths, rows)


def report_to_text(report: DeltaReport) -> str:
    rows = []
    for m in report.enc_depths:
        row = [str(m)]
        for n in report.dec_depths:
            d = report.deltas[(m, n)]
            row.append("ERR" if d is None else f"{d:+.3f}")
        rows.append(row)
    title = f"delta ({report.label_b} - {report.label_a})"
    body = _table(title, report.dec_depths, rows)
    summary = (
        f"mean {report.label_a} {report.mean_a!r}\n"
        f"mean {report.label_b} {report.mean_b!r}\n"
        f"mean delta {report.mean_delta!r}\n"
        f"{report.winner_line()}\n"
    )
    return body + summary
