#!/usr/bin/env python3
"""Benchmark harness for synthetic-landscape tasks, spoken over the
subprocess evaluator protocol.

Usage: landscape_eval.py <task_file> <landscape_file> [workspace]

The candidate's files are read from the workspace (defaults to the current
directory, which the evaluator sets); the landscape path is resolved
relative to the task file. The single-line JSON report goes to stdout.

The latency model mirrors the in-process evaluator exactly: base latency
times the factor of every active directive (in vocabulary order) times the
factor of every interaction whose directives are all active (in declaration
order). An unknown directive or missing prerequisite is a compile error on
every workload.
"""

import json
import os
import sys
import time

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


def parse_directives(text):
    body = text.lstrip()
    if body.startswith("directives:"):
        body = body[len("directives:"):]
    return sorted(set(body.split()))


def check_directives(specs, active):
    by_name = {d["name"]: d for d in specs}
    for name in active:
        spec = by_name.get(name)
        if spec is None:
            return f'unknown directive "{name}"'
        for required in spec.get("requires", []):
            if required not in active:
                return f'directive "{name}" requires "{required}"'
    return None


def latency_us(landscape, active, workload_id):
    latency = landscape["base_us"][workload_id]
    for spec in landscape["directives"]:
        if spec["name"] in active:
            latency *= spec["factor"]
    for interaction in landscape.get("interactions", []):
        if all(name in active for name in interaction["directives"]):
            latency *= interaction["factor"]
    return latency


def main():
    if len(sys.argv) < 3:
        print("usage: landscape_eval.py <task_file> <landscape_file> [workspace]",
              file=sys.stderr)
        return 2

    sleep_s = float(os.environ.get("PLANSEARCH_EVAL_SLEEP", "0"))
    if sleep_s > 0:
        time.sleep(sleep_s)

    task_path = os.path.abspath(sys.argv[1])
    landscape_path = os.path.join(os.path.dirname(task_path), sys.argv[2])
    workspace = sys.argv[3] if len(sys.argv) > 3 else os.getcwd()

    with open(task_path, "rb") as fh:
        task = tomllib.load(fh)
    with open(landscape_path, "rb") as fh:
        landscape = tomllib.load(fh)

    primary = task["file_manifest"][0]["name"]
    try:
        with open(os.path.join(workspace, primary), encoding="utf-8") as fh:
            text = fh.read()
    except OSError:
        text = None

    workloads = [w["workload_id"] for w in task["workloads"]]
    if text is None:
        failure = f'missing file "{primary}"'
    else:
        active = parse_directives(text)
        failure = check_directives(landscape["directives"], active)

    if failure is not None:
        report = {
            "workloads": [
                {"workload_id": wid, "status": "compile-error", "log_excerpt": failure}
                for wid in workloads
            ],
            "global_log": "",
        }
    else:
        report = {
            "workloads": [
                {
                    "workload_id": wid,
                    "status": "pass",
                    "latency_us": latency_us(landscape, active, wid),
                    "log_excerpt": "",
                }
                for wid in workloads
            ],
            "global_log": "",
        }

    print(json.dumps(report))
    return 0


if __name__ == "__main__":
    sys.exit(main())
