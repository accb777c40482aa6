use mmq_core::experiments::{
    load_results, pareto_frontier, render_svg, rerun_record, run_sota_grid, run_uniform_grid, save_results, GridSpec,
    ProbePlan, UNQUANTIZED_BITS,
};
use mmq_core::pipeline::{build_model, export_weights, import_weights, ComponentId, PipelineSpec, QuantMethod, TaskKind};

fn tiny() -> PipelineSpec {
    PipelineSpec {
        d_model: 16,
        heads: 2,
        vision_blocks: 3,
        connector_blocks: 3,
        language_blocks: 3,
        vocab: 32,
        patch_count: 4,
        patch_dim: 8,
        query_count: 2,
        max_positions: 40,
        ..PipelineSpec::default()
    }
}

fn grid() -> GridSpec {
    GridSpec { bits: Some(vec![2, 8]), seeds: vec![4, 5], group_size: 16, methods: vec![QuantMethod::Gptq], ..GridSpec::default() }
}

#[test]
fn sota_rows_survive_a_csv_round_trip_and_rerun() {
    let spec = tiny();
    let probes = ProbePlan { seed: 1, count: 4 };
    let calibration = ProbePlan { seed: 2, count: 4 };
    let table = run_sota_grid(&spec, &probes, Some(&calibration), &grid()).unwrap();
    assert!(table.failures.is_empty());
    assert_eq!(table.len(), 2 * 3 * 27);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.csv");
    save_results(&table, &path).unwrap();
    let back = load_results(&path).unwrap();
    assert_eq!(back.records, table.records);

    for record in table.records.iter().step_by(17) {
        assert_eq!(&rerun_record(&spec, &probes, Some(&calibration), &grid(), record).unwrap(), record);
    }
    for r in &table.records {
        assert!(r.bpw > 0.0 && r.bpw <= 16.0 && (0.0..=1.0).contains(&r.score));
        if [r.vision_bits, r.connector_bits, r.language_bits] == [UNQUANTIZED_BITS; 3] {
            assert_eq!((r.bpw, r.score), (16.0, 1.0));
        }
    }
}

#[test]
fn uniform_grid_plots_and_frontier() {
    let spec = tiny();
    let grid = GridSpec {
        component_subsets: Some(vec![[ComponentId::Language].into(), ComponentId::ALL.iter().copied().collect()]),
        seeds: vec![4],
        ..grid()
    };
    let table = run_uniform_grid(&spec, &ProbePlan { seed: 1, count: 4 }, &grid).unwrap();
    let frontier = pareto_frontier(&table, TaskKind::Caption);
    assert!(!frontier.is_empty());
    for w in frontier.records.windows(2) {
        assert!(w[0].bpw <= w[1].bpw && w[0].score <= w[1].score);
    }
    let svg = render_svg(&table, TaskKind::Caption).unwrap();
    let caption_rows = table.records.iter().filter(|r| r.task == TaskKind::Caption).count();
    assert_eq!(svg.matches("class=\"point\"").count(), caption_rows);
    assert_eq!(svg.matches("class=\"star\"").count(), 2);
}

#[test]
fn weights_round_trip_through_a_file() {
    let spec = PipelineSpec::projector();
    let w = build_model(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.mmqw");
    export_weights(&w, std::fs::File::create(&path).unwrap()).unwrap();
    let back = import_weights(&spec, std::fs::File::open(&path).unwrap()).unwrap();
    assert_eq!(back, w);
    let other = PipelineSpec::default();
    assert!(import_weights(&other, std::fs::File::open(&path).unwrap()).is_err());
}
