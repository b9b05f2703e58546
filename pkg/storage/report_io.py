# storage/report_io.py

"""Score reports (CSV + JSON sidecar) and metrics reports (JSON + ROC CSV)."""

import csv
import json
from pathlib import Path
from typing import Optional

from schemas.report_schemas import MetricsReport, ScoreRecord, ScoreReport
from storage.headers import csv_body, write_csv_preamble

SCORE_COLUMNS = ["sample_id", "final_score", "fused", "boosted", "scaled", "margin", "predicted_class"]


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


def sidecar_path(score_csv: Path) -> Path:
    return Path(score_csv).with_suffix(".json")


def roc_path(metrics_json: Path) -> Path:
    path = Path(metrics_json)
    return path.with_name(path.stem + "_roc.csv")


def save_score_report(path: Path, report: ScoreReport) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if report.config:
            write_csv_preamble(fh, report.config)
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SCORE_COLUMNS)
        for r in report.records:
            writer.writerow([
                r.sample_id, _fmt(r.final_score), _fmt(r.fused), _fmt(r.boosted),
                _fmt(r.scaled), _fmt(r.margin), r.predicted_class,
            ])
    meta = report.model_dump(mode="json", exclude={"records"})
    meta["retained_ids"] = [r.sample_id for r in report.records if r.retained]
    with open(sidecar_path(path), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_score_report(path: Path) -> ScoreReport:
    path = Path(path)
    meta_file = sidecar_path(path)
    meta = {}
    if meta_file.exists():
        with open(meta_file) as fh:
            meta = json.load(fh)
    retained = set(meta.pop("retained_ids", []))

    def opt(text: str) -> Optional[float]:
        return None if text == "" else float(text)

    records = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(csv_body(fh)):
            sid = int(row["sample_id"])
            records.append(ScoreRecord(
                sample_id=sid,
                final_score=float(row["final_score"]),
                fused=opt(row["fused"]),
                boosted=opt(row["boosted"]),
                scaled=opt(row["scaled"]),
                margin=float(row["margin"]),
                predicted_class=int(row["predicted_class"]),
                retained=sid in retained if meta_file.exists() else True,
            ))
    return ScoreReport.model_validate({**meta, "records": records})


def save_metrics_report(path: Path, metrics: MetricsReport) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(metrics.model_dump_json(indent=2))
        fh.write("\n")
    if metrics.roc:
        with open(roc_path(path), "w", newline="") as fh:
            if metrics.config:
                write_csv_preamble(fh, {**metrics.config, "seeds": metrics.seeds})
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["fpr", "tpr"])
            for fpr, tpr in metrics.roc:
                writer.writerow([repr(float(fpr)), repr(float(tpr))])


def load_metrics_report(path: Path) -> MetricsReport:
    with open(path) as fh:
        return MetricsReport.model_validate_json(fh.read())
