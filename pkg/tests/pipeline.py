"""A small end-to-end CLI run shared by the CLI tests and the determinism check."""

import json
from pathlib import Path

from msd.cli import run

SMALL_INI = """\
[run]
seed = 3
T = 100
S = 10
G = 90
K = 30
per_cell = 2
classifier_steps = 5
ft_batch = 8
[paths]
data = out/data.jsonl
prior = out/prior.ckpt
dis = out/dis.ckpt
pair = out/pair.json
model = out/styled.ckpt
report = out/report
"""


def first_row(data: Path, split: str, style: str) -> dict:
    for line in data.read_text().splitlines():
        row = json.loads(line)
        if row["split"] == split and row["style"] == style:
            return row
    raise LookupError(style)


def run_small_pipeline(root: Path) -> dict:
    """Run every subcommand once under ``root``; returns the artifact paths by name."""
    root.mkdir(parents=True, exist_ok=True)
    ini = root / "run.ini"
    ini.write_text(SMALL_INI)
    out = root / "out"
    cfg = ["--config", str(ini)]

    def step(*argv):
        code = run(list(argv) + cfg)
        assert code == 0, f"{argv[0]} exited with {code}"

    step("gen-data")
    data = out / "data.jsonl"
    style = root / "style.json"
    content = root / "content.json"
    style.write_text(json.dumps(first_row(data, "train", "old")))
    content.write_text(json.dumps(first_row(data, "test", "neutral")))
    step("pretrain", "--steps", "4")
    step("pretrain-dis", "--steps", "4")
    step("pairgen", "--style", str(style))
    step("finetune", "--pair", str(out / "pair.json"))
    step("transfer", "--content", str(content), "--out", str(out / "t.json"), "--bvh", str(out / "t.bvh"))
    step("transfer", "--content", str(content), "--out", str(out / "t0.json"), "--K", "0")
    step("eval")
    step("sweep", "--G", "0,50", "--K", "0,30", "--steps", "1", "--contents", "2", "--out", str(out / "sweep.csv"))
    return {
        "data": data, "prior": out / "prior.ckpt", "dis": out / "dis.ckpt", "pair": out / "pair.json",
        "model": out / "styled.ckpt", "transfer": out / "t.json", "transfer_k0": out / "t0.json",
        "bvh": out / "t.bvh", "report_json": out / "report.json", "report_csv": out / "report.csv",
        "features_csv": out / "report_features.csv", "sweep": out / "sweep.csv",
        "style": style, "content": content, "ini": ini,
    }
