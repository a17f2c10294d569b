"""Inject each supported fault and show where it gets caught."""
from fedgan_trust.audit import audit, parse_transcript
from fedgan_trust.registry import Fault, SimulationConfig, StallError, run_simulation
from fedgan_trust.secret_sharing import SecretShare


def _audit(result):
    shares = [SecretShare.from_bytes(raw) for raw in result.shares().values()]
    return audit(parse_transcript(result.transcript_lines()), shares=shares)


def _show(report):
    print(f"  audit verdict: {report.verdict}")
    for v in report.violations[:4]:
        where = f"round {v['round']}" if "round" in v else f"iteration {v.get('iteration')}"
        print(f"  [{v['source']}] {v['kind']} at registry {v['registry']}, {where}, height {v['height']}")
    if len(report.violations) > 4:
        print(f"  ... {len(report.violations) - 4} more")


def main():
    base = SimulationConfig().with_seed(3)

    print("byzantine-merger:2  (poisoned encrypted sum)")
    result = run_simulation(base.with_faults([Fault.parse("byzantine-merger:2")]))
    print(f"  training still stopped normally after {result.summary['merge_rounds']} rounds")
    _show(_audit(result))

    print("\ntamper-fake-data:2:7  (synthetic batch altered after its hash was recorded)")
    try:
        run_simulation(base.with_faults([Fault.parse("tamper-fake-data:2:7")]))
    except StallError as e:
        print(f"  stall: {e.reason}")
        _show(_audit(e.result))

    print("\nforge-record:3:4  (recorded weights differ from the ones used)")
    result = run_simulation(base.with_faults([Fault.parse("forge-record:3:4")]))
    print("  nothing on-chain objects; the run stops normally")
    _show(_audit(result))


if __name__ == "__main__":
    main()
