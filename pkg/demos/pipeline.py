"""The whole command-line pipeline on a small synthetic scene.

Generates a sequence, fits the head proxy, trains the implicit model for a
few epochs, extracts a mesh, drives the model with its own poses and scores
both the proxy and the trained model against the ground-truth depth. The
epoch count is far below the desk profile so the script finishes in minutes;
expect the trained model to still trail the proxy at this budget.

    python demos/pipeline.py [workdir] [epochs]
"""
import csv
import subprocess
import sys
import tempfile
from pathlib import Path


def run(*args):
    cmd = [sys.executable, "-m", "headfield.cli", *map(str, args)]
    print("$ headfield", " ".join(map(str, args)), flush=True)
    subprocess.run(cmd, check=True)


def mean_chamfer(report: Path) -> float:
    with open(report, newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if r["frame"] != "mean"]
    return sum(float(r["chamfer"]) for r in rows) / len(rows)


def main():
    work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="headfield-"))
    epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 20
    work.mkdir(parents=True, exist_ok=True)

    run("synth", "--out", work / "data", "--set", "n_frames=4", "--set", "image_size=48")
    run("fit-proxy", "--data", work / "data", "--out", work / "proxy.hfp", "--iters", 100)
    run("train", "--data", work / "data", "--proxy", work / "proxy.hfp", "--out", work / "model.hfc",
        "--epochs", epochs, "--set", "rays_per_step=32", "--set", "n_coarse=32",
        "--set", "n_fine=32", "--save-every", max(1, epochs // 2))
    run("extract", "--ckpt", work / "model.hfc", "--frame", 0, "--out", work / "frame0.obj",
        "--resolution", 48)
    run("reenact", "--ckpt", work / "model.hfc", "--drive", work / "proxy.hfp",
        "--out", work / "reenact", "--resolution", 48)
    run("eval", "--proxy", work / "proxy.hfp", "--data", work / "data", "--out", work / "proxy.csv")
    run("eval", "--ckpt", work / "model.hfc", "--data", work / "data", "--out", work / "model.csv",
        "--resolution", 48)

    print(f"\noutputs in {work}")
    print(f"proxy   mean Chamfer {mean_chamfer(work / 'proxy.csv'):.4f}")
    print(f"trained mean Chamfer {mean_chamfer(work / 'model.csv'):.4f}")


if __name__ == "__main__":
    main()
