use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::pipeline::{join_tokens, parse_tokens, BlockGroup, ComponentId, LayerType, PipelineSpec, QuantMethod, TaskKind};

pub const CSV_HEADER: [&str; 13] = [
    "run_id",
    "method",
    "task",
    "vision_bits",
    "connector_bits",
    "language_bits",
    "groups",
    "layer_types",
    "group_size",
    "bpw",
    "score",
    "seed",
    "wall_ms",
];

/// Bits recorded for a component that was left in full precision.
pub const UNQUANTIZED_BITS: u8 = 16;

/// Rounds to six significant digits, the precision results are stored at.
pub fn round_sig(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().expect("formatted float parses")
}

/// One scored grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub method: QuantMethod,
    pub task: TaskKind,
    pub vision_bits: u8,
    pub connector_bits: u8,
    pub language_bits: u8,
    pub groups: BTreeSet<BlockGroup>,
    pub layer_types: BTreeSet<LayerType>,
    /// Input channels per grid; 0 for per-tensor grids.
    pub group_size: usize,
    pub bpw: f64,
    pub score: f64,
    pub seed: u64,
    pub wall_ms: u64,
}

/// The configuration part of a cell; `run_id` is a hash of it.
#[derive(Debug, Clone, PartialEq)]
pub struct CellKey {
    pub method: QuantMethod,
    pub task: TaskKind,
    pub bits: [u8; 3],
    pub groups: BTreeSet<BlockGroup>,
    pub layer_types: BTreeSet<LayerType>,
    pub group_size: usize,
    pub seed: u64,
}

impl CellKey {
    pub fn run_id(&self, spec: &PipelineSpec) -> String {
        let spec_json = serde_json::to_string(spec).expect("spec serializes");
        let text = format!(
            "{spec_json}|{}|{}|{}|{}|{}|{}|{}|{}|{}",
            self.method,
            self.task,
            self.bits[0],
            self.bits[1],
            self.bits[2],
            join_tokens(&self.groups),
            join_tokens(&self.layer_types),
            self.group_size,
            self.seed
        );
        hex::encode(&Sha256::digest(text.as_bytes())[..8])
    }

    pub fn record(&self, spec: &PipelineSpec, bpw: f64, score: f64, wall_ms: u64) -> RunRecord {
        RunRecord {
            run_id: self.run_id(spec),
            method: self.method,
            task: self.task,
            vision_bits: self.bits[0],
            connector_bits: self.bits[1],
            language_bits: self.bits[2],
            groups: self.groups.clone(),
            layer_types: self.layer_types.clone(),
            group_size: self.group_size,
            bpw: round_sig(bpw),
            score: round_sig(score),
            seed: self.seed,
            wall_ms,
        }
    }
}

impl RunRecord {
    pub fn bits(&self, component: ComponentId) -> u8 {
        match component {
            ComponentId::Vision => self.vision_bits,
            ComponentId::Connector => self.connector_bits,
            ComponentId::Language => self.language_bits,
        }
    }

    /// Components quantized below 16 bits in this cell.
    pub fn quantized_components(&self) -> Vec<ComponentId> {
        ComponentId::ALL.iter().copied().filter(|&c| self.bits(c) < UNQUANTIZED_BITS).collect()
    }

    pub fn covers_all_blocks(&self) -> bool {
        self.groups.len() == BlockGroup::ALL.len() && self.layer_types.len() == LayerType::ALL.len()
    }

    /// Whether every component in `present` shares one bit width `k` over all
    /// blocks and layer types, with `k` equal to 8 or 16.
    pub fn is_full_pipeline(&self, present: &[ComponentId]) -> bool {
        let Some(&first) = present.first() else { return false };
        let k = self.bits(first);
        self.covers_all_blocks() && (k == 8 || k == 16) && present.iter().all(|&c| self.bits(c) == k)
    }
}

/// A cell that errored; kept out of the results but reported.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedCell {
    pub run_id: String,
    pub description: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultsTable {
    pub records: Vec<RunRecord>,
    pub failures: Vec<FailedCell>,
}

impl ResultsTable {
    pub fn new(records: Vec<RunRecord>) -> Self {
        let mut t = Self { records, failures: Vec::new() };
        t.sort();
        t
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Orders records by run_id (ties by task and seed) and failures likewise.
    pub fn sort(&mut self) {
        self.records.sort_by(|a, b| (&a.run_id, a.task, a.seed).cmp(&(&b.run_id, b.task, b.seed)));
        self.failures.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    }

    pub fn extend(&mut self, other: ResultsTable) {
        self.records.extend(other.records);
        self.failures.extend(other.failures);
        self.sort();
    }

    pub fn for_task(&self, task: TaskKind) -> ResultsTable {
        ResultsTable {
            records: self.records.iter().filter(|r| r.task == task).cloned().collect(),
            failures: Vec::new(),
        }
    }

    /// Components quantized in at least one record.
    pub fn present_components(&self) -> Vec<ComponentId> {
        ComponentId::ALL
            .iter()
            .copied()
            .filter(|&c| self.records.iter().any(|r| r.bits(c) < UNQUANTIZED_BITS))
            .collect()
    }
}

pub fn write_results<W: Write>(table: &ResultsTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in &table.records {
        w.write_record([
            r.run_id.clone(),
            r.method.to_string(),
            r.task.to_string(),
            r.vision_bits.to_string(),
            r.connector_bits.to_string(),
            r.language_bits.to_string(),
            join_tokens(&r.groups),
            join_tokens(&r.layer_types),
            r.group_size.to_string(),
            round_sig(r.bpw).to_string(),
            round_sig(r.score).to_string(),
            r.seed.to_string(),
            r.wall_ms.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_results(table: &ResultsTable, path: impl AsRef<Path>) -> Result<()> {
    write_results(table, std::fs::File::create(path)?)
}

fn field<T: std::str::FromStr>(line: u64, name: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::MalformedRow { line, message: format!("bad {name} '{value}'") })
}

fn bits_field(line: u64, name: &str, value: &str) -> Result<u8> {
    let b: u8 = field(line, name, value)?;
    if !(2..=16).contains(&b) {
        return Err(Error::MalformedRow { line, message: format!("{name} {b} outside 2..=16") });
    }
    Ok(b)
}

fn unit_interval(line: u64, name: &str, value: &str, lo_open: bool, hi: f64) -> Result<f64> {
    let v: f64 = field(line, name, value)?;
    let ok = v.is_finite() && if lo_open { v > 0.0 } else { v >= 0.0 } && v <= hi;
    if !ok {
        return Err(Error::MalformedRow { line, message: format!("{name} {v} out of range") });
    }
    Ok(v)
}

pub fn read_results<R: Read>(input: R) -> Result<ResultsTable> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(input);
    let mut records = Vec::new();
    let mut rows = reader.records();
    match rows.next() {
        Some(header) => {
            let header = header?;
            if header.iter().ne(CSV_HEADER.iter().copied()) {
                return Err(Error::MalformedRow { line: 1, message: "unexpected header".into() });
            }
        }
        None => return Err(Error::MalformedRow { line: 1, message: "missing header".into() }),
    }
    for row in rows {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::MalformedRow { line, message: e.to_string() }
        })?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != CSV_HEADER.len() {
            return Err(Error::MalformedRow { line, message: format!("{} fields, expected 13", row.len()) });
        }
        let groups = parse_tokens(&row[6]).map_err(|e| Error::MalformedRow { line, message: e.to_string() })?;
        let layer_types = parse_tokens(&row[7]).map_err(|e| Error::MalformedRow { line, message: e.to_string() })?;
        records.push(RunRecord {
            run_id: row[0].to_string(),
            method: field(line, "method", &row[1])?,
            task: field(line, "task", &row[2])?,
            vision_bits: bits_field(line, "vision_bits", &row[3])?,
            connector_bits: bits_field(line, "connector_bits", &row[4])?,
            language_bits: bits_field(line, "language_bits", &row[5])?,
            groups,
            layer_types,
            group_size: field(line, "group_size", &row[8])?,
            bpw: unit_interval(line, "bpw", &row[9], true, 16.0)?,
            score: unit_interval(line, "score", &row[10], false, 1.0)?,
            seed: field(line, "seed", &row[11])?,
            wall_ms: field(line, "wall_ms", &row[12])?,
        });
    }
    Ok(ResultsTable { records, failures: Vec::new() })
}

pub fn load_results(path: impl AsRef<Path>) -> Result<ResultsTable> {
    read_results(std::fs::File::open(path)?)
}

/// Records of `task` not dominated in (lower bpw, higher score), sorted by
/// bpw. Exact ties on both axes are all kept.
pub fn pareto_frontier(table: &ResultsTable, task: TaskKind) -> ResultsTable {
    let rows: Vec<&RunRecord> = table.records.iter().filter(|r| r.task == task).collect();
    let mut front: Vec<RunRecord> = rows
        .iter()
        .filter(|r| {
            !rows.iter().any(|o| {
                o.bpw <= r.bpw && o.score >= r.score && (o.bpw < r.bpw || o.score > r.score)
            })
        })
        .map(|r| (*r).clone())
        .collect();
    front.sort_by(|a, b| a.bpw.total_cmp(&b.bpw).then_with(|| a.run_id.cmp(&b.run_id)));
    ResultsTable { records: front, failures: Vec::new() }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(bpw: f64, score: f64) -> RunRecord {
        let key = CellKey {
            method: QuantMethod::Uniform,
            task: TaskKind::Caption,
            bits: [4, 16, 4],
            groups: [BlockGroup::Front, BlockGroup::End].into(),
            layer_types: LayerType::ALL.iter().copied().collect(),
            group_size: 0,
            seed: (bpw * 1000.0) as u64 + (score * 1000.0) as u64,
        };
        key.record(&PipelineSpec::default(), bpw, score, 0)
    }

    #[test]
    fn empty_table_is_header_only() {
        let mut buf = Vec::new();
        write_results(&ResultsTable::default(), &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), format!("{}\n", CSV_HEADER.join(",")));
        assert!(read_results(buf.as_slice()).unwrap().is_empty());
    }

    #[test]
    fn token_fields() {
        let mut buf = Vec::new();
        write_results(&ResultsTable::new(vec![row(4.5, 0.25)]), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().nth(1).unwrap().contains(",front+end,attn+ff,0,4.5,0.25,"), "{text}");
    }

    #[test]
    fn round_trip_is_identity() {
        let rows: Vec<RunRecord> = (0..50).map(|i| row(2.0 + i as f64 / 7.0, (i as f64 / 51.0).sqrt())).collect();
        let table = ResultsTable::new(rows);
        let mut buf = Vec::new();
        write_results(&table, &mut buf).unwrap();
        let back = read_results(buf.as_slice()).unwrap();
        assert_eq!(back, table);
        let mut again = Vec::new();
        write_results(&back, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn malformed_rows_report_lines() {
        let mut buf = Vec::new();
        write_results(&ResultsTable::new(vec![row(4.0, 0.5), row(5.0, 0.5)]), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap().replacen("0.5,", "1.5,", 2);
        let err = read_results(text.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::MalformedRow { line: 2, .. }), "{err}");
        let bad = format!("{}\nx,uniform,vqa,4,16\n", CSV_HEADER.join(","));
        assert!(matches!(read_results(bad.as_bytes()), Err(Error::MalformedRow { line: 2, .. })));
        assert!(matches!(read_results("a,b\n".as_bytes()), Err(Error::MalformedRow { line: 1, .. })));
    }

    #[test]
    fn six_significant_digits() {
        assert_eq!(round_sig(0.123456789), 0.123457);
        assert_eq!(round_sig(4.25), 4.25);
        assert_eq!(round_sig(16.0), 16.0);
        assert_eq!(round_sig(1234567.0), 1234570.0);
    }

    fn scores(t: &ResultsTable) -> Vec<(f64, f64)> {
        t.records.iter().map(|r| (r.bpw, r.score)).collect()
    }

    #[test]
    fn frontier_examples() {
        let one = ResultsTable::new(vec![row(4.0, 0.9)]);
        assert_eq!(pareto_frontier(&one, TaskKind::Caption), one);
        let two = ResultsTable::new(vec![row(4.0, 0.9), row(8.0, 0.8)]);
        assert_eq!(scores(&pareto_frontier(&two, TaskKind::Caption)), vec![(4.0, 0.9)]);
        let three = ResultsTable::new(vec![row(8.0, 0.9), row(4.0, 0.8), row(6.0, 0.9)]);
        assert_eq!(scores(&pareto_frontier(&three, TaskKind::Caption)), vec![(4.0, 0.8), (6.0, 0.9)]);
        let mut tied = vec![row(4.0, 0.8), row(4.0, 0.8)];
        tied[1].seed += 1;
        tied[1].run_id = "other".into();
        assert_eq!(pareto_frontier(&ResultsTable::new(tied), TaskKind::Caption).len(), 2);
        assert!(pareto_frontier(&three, TaskKind::Vqa).is_empty());
    }

    #[test]
    fn run_ids_are_stable_and_distinct() {
        let a = row(4.0, 0.5);
        assert_eq!(a.run_id, row(4.0, 0.5).run_id);
        assert_ne!(a.run_id, row(4.0, 0.6).run_id);
        assert_eq!(a.run_id.len(), 16);
    }
}
