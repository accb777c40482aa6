//! Grid execution, bits-per-weight accounting, result persistence and
//! Pareto queries.

mod bpw;
mod plot;
mod records;
mod runner;

pub use bpw::{compute_bpw, BASELINE_BITS};
pub use plot::render_svg;
pub use records::{
    load_results, pareto_frontier, read_results, round_sig, save_results, write_results, CellKey, FailedCell,
    ResultsTable, RunRecord, CSV_HEADER, UNQUANTIZED_BITS,
};
pub use runner::{
    nonempty_subsets, rerun_record, run_sota_grid, run_uniform_grid, sota_cells, uniform_cells, Cell, GridSpec,
    ProbePlan, SeedContext, DEFAULT_SOTA_BITS, DEFAULT_UNIFORM_BITS,
};
