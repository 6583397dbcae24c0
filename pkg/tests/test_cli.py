"""Command-line entry points, exercised in process through main()."""

import json
from pathlib import Path

import pytest

from docforge.augment import AugmentationRecord, remap_bboxes
from docforge.cli import main
from docforge.compose import DatasetRecord, GenerationConfig
from docforge.raster import Canvas

BASE_ARGS = ["--pages", "4", "--stage1", "2", "--seed", "33",
             "--page-width", "496", "--page-height", "702",
             "--augment-fraction", "0.5"]


def run(capsys, *argv) -> tuple[int, str, str]:
    code = main(list(argv))
    cap = capsys.readouterr()
    return code, cap.out, cap.err


def read_error(err: str) -> dict:
    payload = json.loads(err.strip().splitlines()[-1])
    assert set(payload) == {"error"}
    assert set(payload["error"]) == {"type", "message"}
    return payload["error"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("cli") / "ds"
    code = main(["generate", "--out", str(out), *BASE_ARGS])
    assert code == 0
    return out


# ---------------------------------------------------------------------------
# Exit codes and error envelope
# ---------------------------------------------------------------------------

def test_help_exits_zero(capsys):
    code, out, _ = run(capsys, "--help")
    assert code == 0
    assert "generate" in out and "evaluate" in out


def test_missing_subcommand_is_usage_error(capsys):
    code, _, err = run(capsys)
    assert code == 2
    assert "usage" in err


def test_unknown_subcommand_is_usage_error(capsys):
    code, _, _ = run(capsys, "distill")
    assert code == 2


def test_user_error_prints_json_envelope(tmp_path, capsys):
    code, _, err = run(capsys, "generate", "--out", str(tmp_path / "x"),
                       "--pages", "2", "--augment-fraction", "7")
    assert code == 2
    payload = read_error(err)
    assert "augment_fraction" in payload["message"]


def test_missing_manifest_is_user_error(tmp_path, capsys):
    code, _, err = run(capsys, "evaluate",
                       "--pred", str(tmp_path / "nope.jsonl"),
                       "--gt", str(tmp_path / "nope.jsonl"),
                       "--out", str(tmp_path))
    assert code == 2
    assert "not found" in read_error(err)["message"]


def test_bad_manifest_line_names_position(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"stage": 2, "prompt": "p", "image": "i", '
                   '"target": "<doc></doc>", "meta": {"page_id": "a"}}\n'
                   "{nonsense\n", "utf-8")
    code, _, err = run(capsys, "evaluate", "--pred", str(bad),
                       "--gt", str(bad), "--out", str(tmp_path))
    assert code == 2
    assert ":2:" in read_error(err)["message"]


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def test_generate_prints_summary(dataset, capsys):
    summary = json.loads((dataset / "summary.json").read_text("utf-8"))
    assert summary["pages"] == 4
    assert summary["augmented"] == 2
    assert (dataset / "manifest.jsonl").exists()
    assert len(list((dataset / "pages").glob("*.png"))) == summary["emitted"]


def test_generate_workers_precedence(tmp_path, capsys, monkeypatch):
    cfg = tmp_path / "gen.toml"
    cfg.write_text('pages = 2\nstage1 = 0\nseed = 5\npage_width = 248\n'
                   'page_height = 351\nworkers = 2\n', "utf-8")
    monkeypatch.setenv("DOCFORGE_WORKERS", "4")

    out1 = tmp_path / "flag"
    code, _, _ = run(capsys, "generate", "--config", str(cfg),
                     "--out", str(out1), "--workers", "1")
    assert code == 0
    assert json.loads((out1 / "config.json").read_text())["workers"] == 1

    out2 = tmp_path / "file"
    code, _, _ = run(capsys, "generate", "--config", str(cfg),
                     "--out", str(out2))
    assert code == 0
    assert json.loads((out2 / "config.json").read_text())["workers"] == 2

    cfg2 = tmp_path / "nw.json"
    cfg2.write_text(json.dumps({"pages": 1, "page_width": 248,
                                "page_height": 351}), "utf-8")
    out3 = tmp_path / "env"
    code, _, _ = run(capsys, "generate", "--config", str(cfg2),
                     "--out", str(out3))
    assert code == 0
    assert json.loads((out3 / "config.json").read_text())["workers"] == 4


def test_generate_env_workers_must_be_numeric(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("DOCFORGE_WORKERS", "many")
    code, _, err = run(capsys, "generate", "--out", str(tmp_path / "x"),
                       "--pages", "1")
    assert code == 2
    assert "DOCFORGE_WORKERS" in read_error(err)["message"]


def test_generate_no_images_flag(tmp_path, capsys):
    out = tmp_path / "noimg"
    code, stdout, _ = run(capsys, "generate", "--out", str(out),
                          "--pages", "3", "--page-width", "248",
                          "--page-height", "351", "--no-images")
    assert code == 0
    summary = json.loads(stdout)
    assert summary["emitted"] == 3
    assert not list((out / "pages").glob("*.png"))


def test_generate_cli_matches_library(dataset, tmp_path):
    config = GenerationConfig.from_dict(
        json.loads((dataset / "config.json").read_text("utf-8")))
    assert config.pages == 4 and config.seed == 33


# ---------------------------------------------------------------------------
# augment
# ---------------------------------------------------------------------------

def test_augment_writes_artifacts(dataset, tmp_path, capsys):
    manifest = [DatasetRecord.from_json_line(line) for line in
                (dataset / "manifest.jsonl").read_text().splitlines()]
    page = next(r for r in manifest if r.stage == 2)
    image = dataset / page.image
    sidecar = image.with_suffix(".json")
    out = tmp_path / "aug"
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps(
        {"transforms": [{"name": "rotate", "angle": [90, 90]}]}), "utf-8")

    code, stdout, _ = run(capsys, "augment", "--image", str(image),
                          "--out", str(out), "--spec", str(spec_path),
                          "--seed", "3", "--sidecar", str(sidecar))
    assert code == 0
    result = json.loads(stdout)
    stem = image.stem
    assert Path(result["image"]) == out / f"{stem}.aug.png"
    record = AugmentationRecord.from_json(
        (out / f"{stem}.record.json").read_text("utf-8"))
    assert sorted(record.output_size) == sorted([496, 702])

    remapped = json.loads((out / f"{stem}.remapped.json").read_text("utf-8"))
    blocks = json.loads(sidecar.read_text("utf-8"))["blocks"]
    assert remapped == remap_bboxes(blocks, record)

    from PIL import Image
    with Image.open(result["image"]) as img:
        assert img.size == record.output_size


def test_augment_rejects_bad_spec(tmp_path, capsys):
    png = tmp_path / "page.png"
    Canvas.blank(40, 40).to_png(png)
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps(
        {"transforms": [{"name": "rotate", "angle": [0, 60]}]}), "utf-8")
    code, _, err = run(capsys, "augment", "--image", str(png),
                       "--out", str(tmp_path / "o"), "--spec", str(spec_path))
    assert code == 2
    assert "rotate" in read_error(err)["message"]


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def write_manifest(path: Path, targets: dict[str, str]) -> None:
    lines = []
    for page_id, target in targets.items():
        lines.append(DatasetRecord(
            2, "p", f"pages/{page_id}.png", target,
            {"page_id": page_id}).to_json_line())
    path.write_text("\n".join(lines) + "\n", "utf-8")


DOCS = {
    "p0": "<doc><para>one two three</para></doc>",
    "p1": "<doc><table><tr><td>1</td></tr></table></doc>",
    "p2": "<doc><para>one two three</para></doc>",
    "p3": "<doc><table><tr><td>1</td></tr></table></doc>",
}


def test_evaluate_writes_reports(tmp_path, capsys):
    gt = tmp_path / "gt.jsonl"
    write_manifest(gt, DOCS)
    out = tmp_path / "rep"
    code, stdout, _ = run(capsys, "evaluate", "--pred", str(gt),
                          "--gt", str(gt), "--out", str(out))
    assert code == 0
    report = json.loads((out / "report.json").read_text("utf-8"))
    assert report["aggregate"]["text_edit"] == 0.0
    assert report["aggregate"]["table_teds"] == 1.0
    text = (out / "report.txt").read_text("utf-8")
    assert "text_edit" in text and "p0" in text
    assert stdout.strip() == text.strip()


def test_evaluate_wild_pair_deltas(tmp_path, capsys):
    gt = tmp_path / "gt.jsonl"
    write_manifest(gt, DOCS)
    pred = tmp_path / "pred.jsonl"
    wrong = dict(DOCS)
    wrong["p2"] = "<doc><para>one two threX</para></doc>"
    write_manifest(pred, wrong)
    pairs = tmp_path / "pairs.json"
    pairs.write_text(json.dumps({"pairs": [["p0", "p2"], ["p1", "p3"]]}),
                     "utf-8")
    out = tmp_path / "rep"
    code, _, _ = run(capsys, "evaluate", "--pred", str(pred), "--gt", str(gt),
                     "--out", str(out), "--wild-pair", str(pairs))
    assert code == 0
    report = json.loads((out / "report.json").read_text("utf-8"))
    assert report["deltas"]["text_edit"] > 0.0
    assert report["deltas"]["table_teds"] == 0.0
    # the written report covers the wild subset, deltas are vs the origin one
    assert [p["page_id"] for p in report["pages"]] == ["p2", "p3"]
    assert "delta" in (out / "report.txt").read_text("utf-8")


def test_evaluate_wild_pair_checks_ids(tmp_path, capsys):
    gt = tmp_path / "gt.jsonl"
    write_manifest(gt, DOCS)
    pairs = tmp_path / "pairs.json"
    pairs.write_text(json.dumps({"pairs": [["p0", "p9"]]}), "utf-8")
    code, _, err = run(capsys, "evaluate", "--pred", str(gt), "--gt", str(gt),
                       "--out", str(tmp_path / "rep"),
                       "--wild-pair", str(pairs))
    assert code == 2
    assert "p9" in read_error(err)["message"]


def test_evaluate_repetition_any_mode(tmp_path, capsys):
    gt = tmp_path / "gt.jsonl"
    write_manifest(gt, {"p0": DOCS["p0"]})
    pred = tmp_path / "pred.jsonl"
    looping = "<doc>" + "<para>go go go go</para>" * 50 + "</doc>"
    write_manifest(pred, {"p0": looping})
    out = tmp_path / "rep"
    code, _, _ = run(capsys, "evaluate", "--pred", str(pred), "--gt", str(gt),
                     "--out", str(out), "--repetition-any")
    assert code == 0
    report = json.loads((out / "report.json").read_text("utf-8"))
    assert report["aggregate"]["repetition_rate"] == 1.0


# ---------------------------------------------------------------------------
# inspect
# ---------------------------------------------------------------------------

def manifest_records(dataset: Path) -> list[DatasetRecord]:
    return [DatasetRecord.from_json_line(line) for line in
            (dataset / "manifest.jsonl").read_text().splitlines()]


def test_inspect_plain_page(dataset, tmp_path, capsys):
    rec = next(r for r in manifest_records(dataset)
               if r.stage == 2 and not r.meta["augmented"])
    out = tmp_path / "insp"
    code, stdout, _ = run(capsys, "inspect", "--dataset", str(dataset),
                          "--page-id", rec.meta["page_id"], "--out", str(out))
    assert code == 0
    result = json.loads(stdout)
    assert result["augmented"] is False
    assert Path(result["overlay"]).exists()
    gt_text = (out / f"{rec.meta['page_id']}.gt.txt").read_text("utf-8")
    assert gt_text == rec.target + "\n"
    assert "remapped" not in result


def test_inspect_augmented_page_uses_remapped_boxes(dataset, tmp_path, capsys):
    rec = next(r for r in manifest_records(dataset)
               if r.stage == 2 and r.meta["augmented"])
    pid = rec.meta["page_id"]
    out = tmp_path / "insp"
    code, stdout, _ = run(capsys, "inspect", "--dataset", str(dataset),
                          "--page-id", pid, "--out", str(out))
    assert code == 0
    result = json.loads(stdout)
    assert result["augmented"] is True
    written = json.loads((out / f"{pid}.remapped.json").read_text("utf-8"))
    sidecar = json.loads((dataset / "pages" / f"{pid}.json").read_text("utf-8"))
    record = AugmentationRecord.from_dict(sidecar["augmentation"])
    assert written == remap_bboxes(sidecar["blocks"], record)
    from PIL import Image
    with Image.open(result["overlay"]) as img:
        assert img.size == record.output_size


def test_inspect_unknown_page_id(dataset, tmp_path, capsys):
    code, _, err = run(capsys, "inspect", "--dataset", str(dataset),
                       "--page-id", "p999999", "--out", str(tmp_path))
    assert code == 2
    assert "p999999" in read_error(err)["message"]


# ---------------------------------------------------------------------------
# elements
# ---------------------------------------------------------------------------

def test_elements_build_and_stats(tmp_path, capsys):
    repo_dir = tmp_path / "repo"
    code, stdout, _ = run(capsys, "elements", "build", "--out", str(repo_dir),
                          "--counts", "table=4,formula=3", "--seed", "2")
    assert code == 0
    built = json.loads(stdout)
    assert built["count"] == 7

    code, stdout, _ = run(capsys, "elements", "stats", "--repo", str(repo_dir))
    assert code == 0
    stats = json.loads(stdout)
    assert stats["by_kind"] == {"table": 4, "formula": 3}
    assert stats["hash"] == built["hash"]


def test_elements_build_bad_counts(tmp_path, capsys):
    code, _, err = run(capsys, "elements", "build",
                       "--out", str(tmp_path / "r"), "--counts", "table=lots")
    assert code == 2
    assert "kind=N" in read_error(err)["message"]


def test_elements_ingest(tmp_path, capsys):
    source = tmp_path / "tables.jsonl"
    rows = [
        {"content": "<table><tr><td>a</td><td>b</td></tr></table>",
         "lang": "en"},
        {"content": "<table><tr><td>1</td></tr><tr><td>2</td></tr></table>"},
        {"content": "<p>not a table</p>"},
    ]
    source.write_text("\n".join(json.dumps(r) for r in rows) + "\n", "utf-8")
    repo_dir = tmp_path / "ingested"
    code, stdout, _ = run(capsys, "elements", "ingest", "--source",
                          str(source), "--format", "html-table-jsonl",
                          "--out", str(repo_dir))
    assert code == 0
    report = json.loads(stdout)
    assert report["total"] == 3
    assert report["accepted"] == 2

    code, stdout, _ = run(capsys, "elements", "stats", "--repo", str(repo_dir))
    assert code == 0
    assert json.loads(stdout)["by_kind"] == {"table": 2}
