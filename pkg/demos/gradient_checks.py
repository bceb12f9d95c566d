"""Checking analytic gradients against central finite differences.

Every differentiable operator registers a sampler and an analytic
gradient; the checker perturbs each input coordinate and compares.  The
matmul entry is a calibration row: if it ever drifts, the harness itself
is broken, not the model.
"""

from ovdet.gradcheck import MODEL_OPS, run_grad_checks

report = run_grad_checks(["matmul"], seeds=5)
entry = report["ops"]["matmul"]
print(f"calibration  matmul: max rel {entry['max_rel_error']:.3e}")

report = run_grad_checks(list(MODEL_OPS), seeds=10)
print(f"\nmodel ops over {report['seeds']} seeds "
      f"(eps {report['eps']:g}, tol {report['tol']:g}):")
for op_id, entry in report["ops"].items():
    flag = "ok" if entry["pass"] else "FAIL"
    print(f"  {op_id:<17} max rel {entry['max_rel_error']:.3e} "
          f"(worst seed {entry['worst_seed']}) [{flag}]")
print("suite:", "PASS" if report["pass"] else "FAIL")
