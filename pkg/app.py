# app.py

from pathlib import Path

import streamlit as st

from config.settings import settings
from ui.report_view import show_run_selector

# Page config
st.set_page_config(
    page_title="ACT-LLM Runs",
    page_icon="🤖",
    layout="wide",
    initial_sidebar_state="expanded"
)


def main():
    """Run viewer entry point: streamlit run app.py"""

    with st.sidebar:
        st.title("🤖 ACT-LLM")
        runs_dir = st.text_input("Runs directory", value=str(settings.RUNS_DIR))
        st.caption("Viewer only; runs are produced by cli.py")

    show_run_selector(Path(runs_dir or settings.RUNS_DIR))


if __name__ == "__main__":
    main()
