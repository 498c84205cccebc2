"""Robustness evaluation: accuracy tables over an attack matrix.

The standard matrix follows the fixed column order

    Clean, FGSM(1,2), FGSM(1,8), BIM(10,2), BIM(10,8),
    PGD(10,2), PGD(10,8), MIM(10,2), MIM(10,8), BB-...

where a cell reads KIND(steps, 255*eps). PGD uses step size 1/255 at
eps 2/255 and 2/255 at eps 8/255; the other iterative attacks use
eps/steps. Black-box columns transfer 10-step PGD at eps 8/255 from a
substitute model. All accuracies are exact percentages over the full
set passed in; both heads of one model are scored on the same
adversarial inputs.
"""

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackConfig, run_attack
from .autodiff import InvalidArgumentError
from .model import SeparationNet

EPS_SMALL = 2.0 / 255.0
EPS_LARGE = 8.0 / 255.0

# PGD step sizes per tolerance; other attacks divide eps by the steps.
PGD_ALPHA = {EPS_SMALL: 1.0 / 255.0, EPS_LARGE: 2.0 / 255.0}

TRANSFER_CONFIG = AttackConfig(kind="pgd", eps=EPS_LARGE,
                               alpha=PGD_ALPHA[EPS_LARGE], steps=10)

CHUNK = 50


@dataclass(frozen=True)
class AttackCell:
    label: str
    config: AttackConfig


def cell_label(cfg):
    return f"{cfg.kind.upper()}({cfg.steps},{round(cfg.eps * 255)})"


def standard_cells(eps_values=(EPS_SMALL, EPS_LARGE), steps=10):
    """The fixed attack matrix, kind-major then tolerance."""
    cells = []
    for kind in ("fgsm", "bim", "pgd", "mim"):
        for eps in eps_values:
            if kind == "fgsm":
                cfg = AttackConfig(kind="fgsm", eps=eps, steps=1)
            elif kind == "pgd":
                alpha = PGD_ALPHA.get(eps, eps / 4.0)
                cfg = AttackConfig(kind="pgd", eps=eps, alpha=alpha,
                                   steps=steps)
            else:
                cfg = AttackConfig(kind=kind, eps=eps, alpha=eps / steps,
                                   steps=steps)
            cells.append(AttackCell(label=cell_label(cfg), config=cfg))
    return cells


@dataclass
class ReportRow:
    name: str
    head: str
    values: dict  # column label -> accuracy percent


@dataclass
class RobustnessReport:
    columns: list
    rows: list
    meta: dict = field(default_factory=dict)

    def validate(self):
        for row in self.rows:
            if set(row.values) != set(self.columns):
                raise InvalidArgumentError(
                    f"row {row.name!r} columns do not match the report")
            for label, value in row.values.items():
                if not 0.0 <= value <= 100.0:
                    raise InvalidArgumentError(
                        f"accuracy {value} for {row.name}/{label} outside "
                        "[0, 100]")
        return self


def model_heads(model):
    if isinstance(model, SeparationNet):
        if model.config.variant == "attention":
            return ("attention",)
        return ("attention", "prototype")
    return ("pool",)


def predict_chunked(model, images, head, chunk=64):
    preds = []
    for start in range(0, len(images), chunk):
        batch = images[start:start + chunk]
        if head == "pool":
            preds.append(model.predict(batch))
        else:
            preds.append(model.predict(batch, head=head))
    return np.concatenate(preds) if preds else np.zeros(0, np.int64)


def accuracy_percent(preds, labels):
    return 100.0 * float(np.sum(preds == labels)) / len(labels)


def attack_chunked(model, images, labels, cfg, seed):
    """Generate adversaries in fixed-size chunks to bound graph memory.

    Per-sample gradients are independent, so chunking changes nothing
    but the PGD init stream, which is re-keyed per chunk.
    """
    out = []
    for i, start in enumerate(range(0, len(images), CHUNK)):
        out.append(run_attack(model, images[start:start + CHUNK],
                              labels[start:start + CHUNK], cfg,
                              seed=seed * 1000003 + i))
    return np.concatenate(out)


def evaluate_report(named_models, images, labels, cells, seed=0,
                    substitutes=(), meta=None):
    """Score every model/head against the attack matrix.

    named_models: [(row name, model)]; substitutes: [(name, model)]
    used as black-box sources. Adversaries are generated once per model
    and cell against the joint objective, then both heads are scored on
    those same inputs.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise InvalidArgumentError("nothing to evaluate")
    columns = (["Clean"] + [c.label for c in cells]
               + [f"BB-{name}" for name, _ in substitutes])
    transfer = {}
    for sub_name, sub in substitutes:
        transfer[f"BB-{sub_name}"] = attack_chunked(
            sub, images, labels, TRANSFER_CONFIG, seed)
    rows = []
    for name, model in named_models:
        heads = model_heads(model)
        per_head = {h: {} for h in heads}
        for head in heads:
            per_head[head]["Clean"] = accuracy_percent(
                predict_chunked(model, images, head), labels)
        for cell in cells:
            x_adv = attack_chunked(model, images, labels, cell.config, seed)
            for head in heads:
                per_head[head][cell.label] = accuracy_percent(
                    predict_chunked(model, x_adv, head), labels)
        for label, x_adv in transfer.items():
            for head in heads:
                per_head[head][label] = accuracy_percent(
                    predict_chunked(model, x_adv, head), labels)
        for head in heads:
            rows.append(ReportRow(name=name, head=head,
                                  values=per_head[head]))
    report = RobustnessReport(columns=columns, rows=rows,
                              meta=dict(meta or {}, seed=seed,
                                        n_samples=len(labels)))
    return report.validate()


def render_text(report):
    """Aligned monospace table."""
    name_w = max([len(f"{r.name} ({r.head})") for r in report.rows]
                 + [len("model")])
    header = ["model".ljust(name_w)]
    widths = []
    for col in report.columns:
        w = max(len(col), 6)
        widths.append(w)
        header.append(col.rjust(w))
    lines = ["  ".join(header)]
    lines.append("-" * len(lines[0]))
    for row in report.rows:
        cells = [f"{row.name} ({row.head})".ljust(name_w)]
        for col, w in zip(report.columns, widths):
            cells.append(f"{row.values[col]:.1f}".rjust(w))
        lines.append("  ".join(cells))
    n = report.meta.get("n_samples")
    if n is not None:
        lines.append(f"({n} samples, exact counts)")
    return "\n".join(lines) + "\n"


def render_csv(report):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["model", "head"] + list(report.columns))
    for row in report.rows:
        writer.writerow([row.name, row.head]
                        + [f"{row.values[c]:.4f}" for c in report.columns])
    return buf.getvalue()


def parse_report_csv(text):
    """Inverse of render_csv, for report comparison in tooling."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    columns = header[2:]
    rows = []
    for record in reader:
        values = {c: float(v) for c, v in zip(columns, record[2:])}
        rows.append(ReportRow(name=record[0], head=record[1], values=values))
    return RobustnessReport(columns=columns, rows=rows).validate()
