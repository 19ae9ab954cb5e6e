import json
from pathlib import Path
from typing import Any, Dict, List

import streamlit as st

from utils.helpers import read_json, read_jsonl


def discover_runs(runs_dir: Path) -> List[Path]:
    """Run directories (anything holding a manifest.json), newest name first"""
    runs_dir = Path(runs_dir)
    if not runs_dir.exists():
        return []
    return sorted((p.parent for p in runs_dir.rglob("manifest.json")), key=lambda p: str(p), reverse=True)


def load_run(run_dir: Path) -> Dict[str, Any]:
    """Everything the viewer shows for one run; missing pieces come back empty"""
    run_dir = Path(run_dir)
    run: Dict[str, Any] = {"path": str(run_dir), "manifest": {}, "reports": {}, "metrics": [], "records": []}
    try:
        run["manifest"] = read_json(run_dir / "manifest.json")
    except (OSError, json.JSONDecodeError):
        pass
    for path in sorted(run_dir.glob("report*.json")):
        try:
            run["reports"][path.stem] = read_json(path)
        except (OSError, json.JSONDecodeError):
            continue
    for name, key in (("metrics.jsonl", "metrics"), ("records.jsonl", "records")):
        if (run_dir / name).exists():
            try:
                run[key] = read_jsonl(run_dir / name)
            except json.JSONDecodeError:
                run[key] = []
    return run


def render_reports(reports: Dict[str, Dict[str, Any]]):
    st.subheader("🎯 Success reports")
    if not reports:
        st.info("No evaluation reports in this run.")
        return
    for name, report in reports.items():
        cols = st.columns(4)
        cols[0].metric("Level", report.get("level", "?"))
        cols[1].metric("Success rate", f"{report.get('success_rate', 0.0):.1%}")
        cols[2].metric("Description F1", f"{report.get('mean_f1', 0.0):.3f}")
        cols[3].metric("Episodes", report.get("n_episodes", 0))
        breakdown = report.get("per_template", [])
        if breakdown:
            with st.expander(f"Per-template breakdown ({name})"):
                st.table([
                    {"template": t["template_id"], "success": round(t["success_rate"], 4), "F1": round(t["mean_f1"], 4), "episodes": t["n_episodes"]}
                    for t in breakdown
                ])
    st.divider()


def render_loss_curve(metrics: List[Dict[str, Any]]):
    st.subheader("📊 Training loss")
    if not metrics:
        st.info("No training metrics in this run.")
        return
    st.line_chart(
        {key: [m[key] for m in metrics] for key in ("total", "scene_loss", "action_loss")},
    )
    last = metrics[-1]
    st.caption(f"step {last['step']}: total {last['total']:.4f}, grad norm {last['grad_norm']:.3f}, lr {last['lr']:.2e}")
    st.divider()


def render_records(records: List[Dict[str, Any]]):
    """Generated descriptions and actions per rollout step"""
    with st.expander("💬 Rollout records", expanded=False):
        if not records:
            st.warning("No rollout records in this run.")
            return
        episode = st.selectbox("Episode", options=[r["episode"] for r in records])
        record = next(r for r in records if r["episode"] == episode)
        st.write(f"**{record['template_id']}**, seed {record['seed']}: "
                 f"{'✅ success' if record['success'] else '❌ failure'} after {record['steps_used']}/{record['max_steps']} steps")
        for step in record.get("records", []):
            st.markdown(f"**Step {step['step']}** · {step['action']['skill']} "
                        f"{step['action']['p_initial']} → {step['action']['p_target']} "
                        f"(F1 now {step['f1_current']:.2f}"
                        + (f", next {step['f1_next']:.2f})" if step.get('f1_next') is not None else ")"))
            st.json({"current": step["current"], "next": step.get("next")}, expanded=False)


def show_run_selector(runs_dir: Path):
    st.title("🤖 ACT-LLM Run Viewer")
    st.markdown("Read-only view of finished runs: reports, loss curves and generated descriptions.")

    runs = discover_runs(runs_dir)
    if not runs:
        st.info(f"No runs under {runs_dir}. Run a cli.py command with --out inside it first.")
        return

    options = {str(p.relative_to(runs_dir)) if p != Path(runs_dir) else ".": p for p in runs}
    selected = st.selectbox("Choose a run:", options=list(options.keys()))
    if selected:
        run = load_run(options[selected])
        manifest = run["manifest"]
        if manifest:
            st.caption(f"command `{manifest.get('command', '?')}` · {len(manifest.get('files', []))} files")
        st.divider()
        render_reports(run["reports"])
        render_loss_curve(run["metrics"])
        render_records(run["records"])
