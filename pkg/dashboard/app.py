from __future__ import annotations

import logging
import sys
from pathlib import Path

import pandas as pd
import plotly.graph_objects as go
import streamlit as st

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))
from src.report import load_run


ROOT = Path(__file__).resolve().parents[1]
RUNS_DIR = ROOT / "runs"

logger = logging.getLogger(__name__)


def list_runs(runs_dir: Path = RUNS_DIR) -> list[Path]:
    if not runs_dir.exists():
        return []
    return sorted(p for p in runs_dir.iterdir() if p.is_dir() and (p / "metrics.csv").exists())


def group_curve_figure(groups: pd.DataFrame, strategy: str) -> go.Figure | None:
    """Mean accuracy per group with a +-1 std band around it."""
    df = groups[groups["strategy"] == strategy].sort_values("round")
    if df.empty:
        return None

    fig = go.Figure()
    for group_id, part in df.groupby("group_id"):
        upper = part["mean"] + part["std"]
        lower = part["mean"] - part["std"]
        fig.add_trace(go.Scatter(
            x=pd.concat([part["round"], part["round"][::-1]]),
            y=pd.concat([upper, lower[::-1]]),
            fill="toself",
            line={"width": 0},
            opacity=0.2,
            showlegend=False,
            hoverinfo="skip",
            name=f"group {group_id} band",
        ))
        fig.add_trace(go.Scatter(
            x=part["round"],
            y=part["mean"],
            mode="lines",
            name=f"group {group_id}",
        ))

    fig.update_layout(
        margin={"l": 20, "r": 20, "t": 20, "b": 20},
        height=360,
        legend_title_text="Group",
        xaxis_title="Round",
        yaxis_title="Accuracy",
    )
    return fig


def projection_figure(projections: pd.DataFrame, strategy: str) -> go.Figure | None:
    df = projections[projections["strategy"] == strategy]
    if df.empty:
        return None

    fig = go.Figure()
    for group_id, part in df.groupby("group_id"):
        fig.add_trace(go.Scatter(
            x=part["x"],
            y=part["y"],
            mode="markers",
            marker={"size": 5},
            opacity=0.7,
            name=f"group {group_id}",
        ))
    fig.update_layout(
        margin={"l": 20, "r": 20, "t": 20, "b": 20},
        height=420,
        legend_title_text="Group",
        xaxis_title="PC 1",
        yaxis_title="PC 2",
    )
    return fig


def main() -> None:
    st.set_page_config(page_title="Federated Concepts Dashboard", layout="wide")
    st.title("Federated Concepts Dashboard")
    st.caption("Group-wise learning curves, final-round summary and preference projections of a run.")

    runs = list_runs()
    if not runs:
        st.error(f"No runs with a metrics.csv found under {RUNS_DIR}.")
        return

    run_dir = st.selectbox("Run", runs, format_func=lambda p: p.name)
    tables = load_run(run_dir)
    if not (run_dir / "DONE").exists():
        st.warning("This run has no DONE marker; artifacts may be partial.")

    if "summary" in tables:
        st.header("Summary")
        st.dataframe(tables["summary"], use_container_width=True)

    if "groups" in tables:
        st.header("Group-wise Accuracy")
        strategies = sorted(tables["groups"]["strategy"].unique().tolist())
        for strategy in st.multiselect("Strategies", strategies, default=strategies):
            fig = group_curve_figure(tables["groups"], strategy)
            if fig is None:
                st.warning(f"{strategy}: no group curves.")
                continue
            st.markdown(f"**{strategy}**")
            st.plotly_chart(fig, use_container_width=True)

    if "projections" in tables:
        st.header("Projections")
        options = sorted(tables["projections"]["strategy"].unique().tolist())
        strategy = st.selectbox("Strategy", options, key="projection_strategy")
        fig = projection_figure(tables["projections"], strategy)
        if fig is not None:
            st.plotly_chart(fig, use_container_width=True)

    if "sweep" in tables:
        st.header("Sweep")
        st.dataframe(tables["sweep"], use_container_width=True)


if __name__ == "__main__":
    main()
