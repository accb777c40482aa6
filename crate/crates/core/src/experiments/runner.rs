use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bpw::bpw_of;
use super::records::{CellKey, FailedCell, ResultsTable, RunRecord, UNQUANTIZED_BITS};
use crate::error::{Error, Result};
use crate::pipeline::{
    build_model, collect_calibration, quantize_layers, BlockGroup, ComponentId, LayerAddress, LayerType, LedgerEntry,
    ModelWeights, PipelineSpec, QuantConfig, QuantMethod, Selector, TaskKind, VisualPrefix,
};
use crate::quantizers::{CalibrationSet, DEFAULT_BLOCK_SIZE, DEFAULT_DAMPING, DEFAULT_GROUP_SIZE};
use crate::tasks::{
    agreement, default_horizon, generate_tokens, make_probe_set, text_embeddings, visual_prefixes, ProbeSet,
    RetrievalOutputs, TaskOutputs,
};
use crate::Matrix;

pub const DEFAULT_UNIFORM_BITS: [u8; 4] = [2, 4, 6, 8];
pub const DEFAULT_SOTA_BITS: [u8; 6] = [2, 3, 4, 5, 6, 8];

/// Seed and size of a probe set. The probe set used for grid seed `s` is
/// drawn with seed `seed + s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbePlan {
    pub seed: u64,
    pub count: usize,
}

impl ProbePlan {
    pub fn probes_for(&self, spec: &PipelineSpec, grid_seed: u64) -> Result<ProbeSet> {
        make_probe_set(spec, self.seed.wrapping_add(grid_seed), self.count)
    }
}

/// Which cells a grid runs. `None` subset lists mean every non-empty subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    /// Bit widths; defaults to 2,4,6,8 for the uniform grid and 2,3,4,5,6,8
    /// for the per-component grid. 16 means "left unquantized".
    pub bits: Option<Vec<u8>>,
    pub component_subsets: Option<Vec<BTreeSet<ComponentId>>>,
    pub group_subsets: Option<Vec<BTreeSet<BlockGroup>>>,
    pub layer_type_subsets: Option<Vec<BTreeSet<LayerType>>>,
    /// Methods of the per-component grid.
    pub methods: Vec<QuantMethod>,
    pub tasks: Vec<TaskKind>,
    /// Each seed builds its own model and probe sets.
    pub seeds: Vec<u64>,
    pub group_size: usize,
    pub damping: f64,
    pub block_size: usize,
    /// Fill `wall_ms` with measured time instead of 0.
    pub record_timing: bool,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            bits: None,
            component_subsets: None,
            group_subsets: None,
            layer_type_subsets: None,
            methods: vec![QuantMethod::Gptq, QuantMethod::Awq],
            tasks: TaskKind::ALL.to_vec(),
            seeds: vec![7],
            group_size: DEFAULT_GROUP_SIZE,
            damping: DEFAULT_DAMPING,
            block_size: DEFAULT_BLOCK_SIZE,
            record_timing: false,
        }
    }
}

/// Every non-empty subset of `items`, smallest first.
pub fn nonempty_subsets<T: Copy + Ord>(items: &[T]) -> Vec<BTreeSet<T>> {
    let mut out: Vec<BTreeSet<T>> = (1..1u32 << items.len())
        .map(|mask| items.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, &t)| t).collect())
        .collect();
    out.sort_by_key(|s| s.len());
    out
}

impl GridSpec {
    fn bits_or(&self, default: &[u8]) -> Result<Vec<u8>> {
        let bits = self.bits.clone().unwrap_or_else(|| default.to_vec());
        if bits.is_empty() {
            return Err(Error::InvalidArgument("grid needs at least one bit width".into()));
        }
        if let Some(b) = bits.iter().find(|b| !(2..=16).contains(*b)) {
            return Err(Error::InvalidArgument(format!("bit width {b} outside 2..=16")));
        }
        Ok(bits.into_iter().collect::<BTreeSet<_>>().into_iter().collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() || self.seeds.is_empty() {
            return Err(Error::InvalidArgument("grid needs at least one task and one seed".into()));
        }
        if self.group_size == 0 || self.block_size == 0 {
            return Err(Error::InvalidArgument("group_size and block_size must be positive".into()));
        }
        if !(self.damping.is_finite() && self.damping > 0.0) {
            return Err(Error::InvalidArgument(format!("damping {} must be positive", self.damping)));
        }
        let empty = |n: &Option<Vec<_>>| n.as_ref().is_some_and(|v: &Vec<BTreeSet<_>>| v.is_empty());
        if empty(&self.component_subsets) {
            return Err(Error::InvalidArgument("component_subsets is empty".into()));
        }
        if self.group_subsets.as_ref().is_some_and(Vec::is_empty)
            || self.layer_type_subsets.as_ref().is_some_and(Vec::is_empty)
        {
            return Err(Error::InvalidArgument("group_subsets and layer_type_subsets must not be empty".into()));
        }
        Ok(())
    }

    fn config(&self, method: QuantMethod, bits: u8) -> QuantConfig {
        QuantConfig { method, bits, group_size: self.group_size, damping: self.damping, block_size: self.block_size }
    }

    fn recorded_group_size(&self, method: QuantMethod) -> usize {
        if method == QuantMethod::Uniform {
            0
        } else {
            self.group_size
        }
    }
}

type Assignment = BTreeMap<LayerAddress, u8>;
type Descriptor = (QuantMethod, Vec<(LayerAddress, u8)>);
type Quantized = BTreeMap<LayerAddress, (Arc<Matrix>, LedgerEntry)>;

/// One grid cell before scoring: the layers to replace and the row fields
/// shared by every task.
#[derive(Debug, Clone)]
pub struct Cell {
    pub method: QuantMethod,
    pub bits: [u8; 3],
    pub groups: BTreeSet<BlockGroup>,
    pub layer_types: BTreeSet<LayerType>,
    pub group_size: usize,
    assignment: Assignment,
}

impl Cell {
    fn key(&self, task: TaskKind, seed: u64) -> CellKey {
        CellKey {
            method: self.method,
            task,
            bits: self.bits,
            groups: self.groups.clone(),
            layer_types: self.layer_types.clone(),
            group_size: self.group_size,
            seed,
        }
    }

    fn baseline(method: QuantMethod, group_size: usize) -> Self {
        Cell {
            method,
            bits: [UNQUANTIZED_BITS; 3],
            groups: BlockGroup::ALL.iter().copied().collect(),
            layer_types: LayerType::ALL.iter().copied().collect(),
            group_size,
            assignment: Assignment::new(),
        }
    }

    fn describe(&self) -> String {
        format!(
            "{} vision={} connector={} language={} groups={} layer_types={}",
            self.method,
            self.bits[0],
            self.bits[1],
            self.bits[2],
            crate::pipeline::join_tokens(&self.groups),
            crate::pipeline::join_tokens(&self.layer_types)
        )
    }
}

fn component_slot(c: ComponentId) -> usize {
    match c {
        ComponentId::Vision => 0,
        ComponentId::Connector => 1,
        ComponentId::Language => 2,
    }
}

/// Full-precision model, probes, calibration and caches for one seed.
pub struct SeedContext {
    pub seed: u64,
    pub fp: ModelWeights,
    pub probes: ProbeSet,
    calibration: Option<std::result::Result<CalibrationSet, String>>,
    tasks: Vec<TaskKind>,
    grid: GridSpec,
    quantized: BTreeMap<(QuantMethod, u8), std::result::Result<Quantized, String>>,
    reference: BTreeMap<TaskKind, TaskOutputs>,
    prefixes: Mutex<HashMap<Descriptor, Arc<Vec<VisualPrefix>>>>,
    texts: Mutex<HashMap<Descriptor, Arc<Vec<Vec<f32>>>>>,
}

impl SeedContext {
    pub fn new(
        spec: &PipelineSpec,
        seed: u64,
        probes: &ProbePlan,
        calibration: Option<&ProbePlan>,
        grid: &GridSpec,
    ) -> Result<Self> {
        let spec = PipelineSpec { seed, ..spec.clone() };
        let fp = build_model(&spec)?;
        let probes = probes.probes_for(&spec, seed)?;
        let calibration = calibration.map(|plan| {
            plan.probes_for(&spec, seed)
                .and_then(|set| collect_calibration(&fp, &set, plan.count))
                .map_err(|e| e.to_string())
        });
        let mut ctx = Self {
            seed,
            fp,
            probes,
            calibration,
            tasks: grid.tasks.clone(),
            grid: grid.clone(),
            quantized: BTreeMap::new(),
            reference: BTreeMap::new(),
            prefixes: Mutex::new(HashMap::new()),
            texts: Mutex::new(HashMap::new()),
        };
        for &task in &ctx.tasks {
            let out = ctx.outputs(&ctx.fp, QuantMethod::Uniform, &Assignment::new(), task)?;
            ctx.reference.insert(task, out);
        }
        Ok(ctx)
    }

    /// Quantizes every layer at each of `bits` with `method`, once.
    fn prepare(&mut self, method: QuantMethod, bits: &[u8]) {
        for &b in bits.iter().filter(|&&b| b < UNQUANTIZED_BITS) {
            if self.quantized.contains_key(&(method, b)) {
                continue;
            }
            let calib = match (&self.calibration, method.needs_calibration()) {
                (Some(Err(e)), true) => {
                    self.quantized.insert((method, b), Err(format!("calibration failed: {e}")));
                    continue;
                }
                (Some(Ok(c)), _) => Some(c),
                _ => None,
            };
            let result = quantize_layers(&self.fp, &Selector::all(), &self.grid.config(method, b), calib)
                .map(|layers| layers.into_iter().map(|(a, m, e)| (a, (m, e))).collect())
                .map_err(|e| e.to_string());
            self.quantized.insert((method, b), result);
        }
    }

    fn descriptor(method: QuantMethod, assignment: &Assignment, components: &[ComponentId]) -> Descriptor {
        let layers: Vec<(LayerAddress, u8)> =
            assignment.iter().filter(|(a, _)| components.contains(&a.component)).map(|(a, b)| (*a, *b)).collect();
        (if layers.is_empty() { QuantMethod::Uniform } else { method }, layers)
    }

    fn cached<T>(
        cache: &Mutex<HashMap<Descriptor, Arc<T>>>,
        key: Descriptor,
        compute: impl FnOnce() -> Result<T>,
    ) -> Result<Arc<T>> {
        if let Some(v) = cache.lock().expect("cache lock").get(&key) {
            return Ok(Arc::clone(v));
        }
        let v = Arc::new(compute()?);
        Ok(Arc::clone(cache.lock().expect("cache lock").entry(key).or_insert(v)))
    }

    fn outputs(&self, weights: &ModelWeights, method: QuantMethod, assignment: &Assignment, task: TaskKind) -> Result<TaskOutputs> {
        let vkey = Self::descriptor(method, assignment, &[ComponentId::Vision, ComponentId::Connector]);
        let prefixes = Self::cached(&self.prefixes, vkey, || visual_prefixes(weights, &self.probes))?;
        match task {
            TaskKind::Retrieval => {
                let tkey = Self::descriptor(method, assignment, &[ComponentId::Language]);
                let texts = Self::cached(&self.texts, tkey, || text_embeddings(weights, &self.probes))?;
                Ok(TaskOutputs::Retrieval(RetrievalOutputs {
                    image: prefixes.iter().map(|p| p.embedding.clone()).collect(),
                    text: texts.as_ref().clone(),
                }))
            }
            _ => Ok(TaskOutputs::Tokens(generate_tokens(weights, &prefixes, &self.probes, task, default_horizon(task))?)),
        }
    }

    fn swap_in(&self, cell: &Cell) -> std::result::Result<(ModelWeights, f64), String> {
        let mut swaps = Vec::with_capacity(cell.assignment.len());
        let mut entries = Vec::with_capacity(cell.assignment.len());
        for (addr, &bits) in &cell.assignment {
            let layers = self
                .quantized
                .get(&(cell.method, bits))
                .ok_or_else(|| format!("{} at {bits} bits was not prepared", cell.method))?
                .as_ref()
                .map_err(Clone::clone)?;
            let (m, e) = layers.get(addr).ok_or_else(|| format!("no quantized weights for {addr}"))?;
            swaps.push((*addr, Arc::clone(m)));
            entries.push(e);
        }
        let weights = self.fp.with_layers(swaps).map_err(|e| e.to_string())?;
        let bpw = bpw_of(entries, &weights).map_err(|e| e.to_string())?;
        Ok((weights, bpw))
    }

    /// Scores one cell on every task of the grid.
    pub fn evaluate(&self, spec: &PipelineSpec, cell: &Cell) -> std::result::Result<Vec<RunRecord>, FailedCell> {
        let fail = |error: String| FailedCell {
            run_id: cell.key(self.tasks[0], self.seed).run_id(spec),
            description: format!("{} seed={}", cell.describe(), self.seed),
            error,
        };
        let (weights, bpw) = self.swap_in(cell).map_err(fail)?;
        let mut out = Vec::with_capacity(self.tasks.len());
        for &task in &self.tasks {
            let start = Instant::now();
            let score = self
                .outputs(&weights, cell.method, &cell.assignment, task)
                .and_then(|o| agreement(&o, &self.reference[&task]))
                .map_err(|e| fail(e.to_string()))?;
            let wall_ms = if self.grid.record_timing { start.elapsed().as_millis() as u64 } else { 0 };
            out.push(cell.key(task, self.seed).record(spec, bpw, score, wall_ms));
        }
        Ok(out)
    }
}

/// Uniform sweep cells: one bit width `k`
/// applied to a component subset, block-group subset and layer-type subset.
pub fn uniform_cells(fp: &ModelWeights, grid: &GridSpec) -> Result<Vec<Cell>> {
    grid.validate()?;
    let bits = grid.bits_or(&DEFAULT_UNIFORM_BITS)?;
    let present = fp.components();
    let components = grid.component_subsets.clone().unwrap_or_else(|| nonempty_subsets(&present));
    let groups = grid.group_subsets.clone().unwrap_or_else(|| nonempty_subsets(BlockGroup::ALL));
    let types = grid.layer_type_subsets.clone().unwrap_or_else(|| nonempty_subsets(LayerType::ALL));
    let method = QuantMethod::Uniform;
    let group_size = grid.recorded_group_size(method);

    let mut cells = vec![Cell::baseline(method, group_size)];
    let mut seen = BTreeSet::new();
    for &k in bits.iter().filter(|&&k| k < UNQUANTIZED_BITS) {
        for c in &components {
            for b in &groups {
                for m in &types {
                    let sel = Selector::new(c.iter().copied(), b.iter().copied(), m.iter().copied());
                    let assignment: Assignment = fp.enumerate_layers(&sel).into_iter().map(|a| (a, k)).collect();
                    if assignment.is_empty() {
                        continue;
                    }
                    let mut cell_bits = [UNQUANTIZED_BITS; 3];
                    for a in assignment.keys() {
                        cell_bits[component_slot(a.component)] = k;
                    }
                    if !seen.insert((cell_bits, b.clone(), m.clone())) {
                        continue;
                    }
                    cells.push(Cell { method, bits: cell_bits, groups: b.clone(), layer_types: m.clone(), group_size, assignment });
                }
            }
        }
    }
    Ok(cells)
}

/// Per-component cross product: every present component independently at
/// one of `bits ∪ {16}`, over all blocks and layer types.
pub fn sota_cells(fp: &ModelWeights, grid: &GridSpec) -> Result<Vec<Cell>> {
    grid.validate()?;
    let mut bits = grid.bits_or(&DEFAULT_SOTA_BITS)?;
    if !bits.contains(&UNQUANTIZED_BITS) {
        bits.push(UNQUANTIZED_BITS);
    }
    let present = fp.components();
    let mut combos: Vec<[u8; 3]> = vec![[UNQUANTIZED_BITS; 3]];
    for c in &present {
        combos = combos
            .into_iter()
            .flat_map(|base| {
                bits.iter().map(move |&b| {
                    let mut next = base;
                    next[component_slot(*c)] = b;
                    next
                })
            })
            .collect();
    }
    let mut cells = Vec::new();
    for &method in &grid.methods {
        let group_size = grid.recorded_group_size(method);
        for combo in &combos {
            let mut cell = Cell::baseline(method, group_size);
            cell.bits = *combo;
            for addr in fp.enumerate_layers(&Selector::all()) {
                let b = combo[component_slot(addr.component)];
                if b < UNQUANTIZED_BITS {
                    cell.assignment.insert(addr, b);
                }
            }
            cells.push(cell);
        }
    }
    Ok(cells)
}

fn run_cells(
    spec: &PipelineSpec,
    probes: &ProbePlan,
    calibration: Option<&ProbePlan>,
    grid: &GridSpec,
    build: fn(&ModelWeights, &GridSpec) -> Result<Vec<Cell>>,
) -> Result<ResultsTable> {
    grid.validate()?;
    let mut table = ResultsTable::default();
    for &seed in &grid.seeds {
        let mut ctx = SeedContext::new(spec, seed, probes, calibration, grid)?;
        let cells = build(&ctx.fp, grid)?;
        let mut needed: BTreeMap<QuantMethod, BTreeSet<u8>> = BTreeMap::new();
        for cell in &cells {
            needed.entry(cell.method).or_default().extend(cell.assignment.values().copied());
        }
        for (method, bits) in needed {
            ctx.prepare(method, &bits.into_iter().collect::<Vec<_>>());
        }
        let run_spec = PipelineSpec { seed, ..spec.clone() };
        let results: Vec<_> = cells.par_iter().map(|cell| ctx.evaluate(&run_spec, cell)).collect();
        for r in results {
            match r {
                Ok(records) => table.records.extend(records),
                Err(failed) => table.failures.push(failed),
            }
        }
    }
    table.sort();
    Ok(table)
}

/// Uniform per-tensor sweep over bits × component, block-group and
/// layer-type subsets, plus one full-precision baseline row per task and
/// seed. Selections that pick no layer are folded into the baseline.
pub fn run_uniform_grid(spec: &PipelineSpec, probes: &ProbePlan, grid: &GridSpec) -> Result<ResultsTable> {
    run_cells(spec, probes, None, grid, uniform_cells)
}

/// Per-component bit-width cross product for each calibrated method.
/// Calibration is collected once per seed and shared by every cell; a cell
/// whose quantization fails is reported in `failures` instead of aborting.
pub fn run_sota_grid(
    spec: &PipelineSpec,
    probes: &ProbePlan,
    calibration: Option<&ProbePlan>,
    grid: &GridSpec,
) -> Result<ResultsTable> {
    if calibration.is_none() && grid.methods.iter().any(|m| m.needs_calibration()) {
        return Err(Error::MissingCalibration("calibration probes required".into()));
    }
    run_cells(spec, probes, calibration, grid, sota_cells)
}

/// Scores the cell behind `record` from scratch.
pub fn rerun_record(
    spec: &PipelineSpec,
    probes: &ProbePlan,
    calibration: Option<&ProbePlan>,
    grid: &GridSpec,
    record: &RunRecord,
) -> Result<RunRecord> {
    let grid = GridSpec { tasks: vec![record.task], seeds: vec![record.seed], ..grid.clone() };
    let mut ctx = SeedContext::new(spec, record.seed, probes, calibration, &grid)?;
    let mut cell = Cell::baseline(record.method, record.group_size);
    cell.bits = [record.vision_bits, record.connector_bits, record.language_bits];
    cell.groups = record.groups.clone();
    cell.layer_types = record.layer_types.clone();
    let sel = Selector::new(ComponentId::ALL.iter().copied(), record.groups.iter().copied(), record.layer_types.iter().copied());
    for addr in ctx.fp.enumerate_layers(&sel) {
        let b = cell.bits[component_slot(addr.component)];
        if b < UNQUANTIZED_BITS {
            cell.assignment.insert(addr, b);
        }
    }
    ctx.prepare(record.method, &cell.assignment.values().copied().collect::<BTreeSet<_>>().into_iter().collect::<Vec<_>>());
    let run_spec = PipelineSpec { seed: record.seed, ..spec.clone() };
    let mut records = ctx.evaluate(&run_spec, &cell).map_err(|f| Error::InvalidArgument(f.error))?;
    Ok(records.remove(0))
}
