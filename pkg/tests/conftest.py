import json

import pytest

from mergesurgery.cli import main


TINY = {
    "seeds": [0],
    "tasks": 2,
    "model": {
        "d": 8, "hidden": 8, "k": 4, "layers": 2, "classes_per_task": 2,
        "n_train": 40, "n_test": 41, "pretrain_steps": 20, "probe_steps": 20, "finetune_steps": 30,
    },
    "merge": {"steps": 5},
    "surgery": {"iterations": 10},
}


def write_config(path, **updates):
    cfg = json.loads(json.dumps(TINY))
    for key, value in updates.items():
        if isinstance(value, dict):
            cfg.setdefault(key, {}).update(value)
        else:
            cfg[key] = value
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """A fully run tiny pipeline (every method, with surgery, plus the report)."""
    root = tmp_path_factory.mktemp("tiny")
    config = write_config(root / "config.json", out=str(root / "out"))
    assert main(["prepare", "--config", str(config)]) == 0
    for method in ("avg", "task-arith", "ties", "adamerging"):
        assert main(["merge", "--config", str(config), "--method", method]) == 0
        assert main(["surgery", "--config", str(config), "--method", method]) == 0
    assert main(["report", "--config", str(config)]) == 0
    return config, root / "out"
