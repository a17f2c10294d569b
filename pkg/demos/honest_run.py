"""Run a three-registry consortium to Stop, then audit the transcript with the exported shares."""
import sys
import tempfile
from pathlib import Path

from fedgan_trust.audit import audit
from fedgan_trust.registry import SimulationConfig, run_simulation


def main(seed=7):
    out = Path(tempfile.mkdtemp(prefix="fedgan-demo-"))
    result = run_simulation(SimulationConfig().with_seed(seed), out_dir=out)
    s = result.summary
    print(f"stopped by registry {s['stop']['registry']} at iteration {s['stop']['iteration']} "
          f"after {s['merge_rounds']} merge rounds ({s['blocks']['gan-interaction']} blocks)")
    for ordinal, rows in sorted(result.datasets.items()):
        print(f"registry {ordinal}: synthetic mean {rows.mean():.3f}, std {rows.std():.3f}")

    report = audit(out / "transcript.jsonl", share_paths=sorted((out / "shares").iterdir()))
    print()
    print(report.to_text())
    print(f"\noutputs in {out}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 7)
