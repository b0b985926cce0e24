//! Optimality zones: which procedure is optimal where in the prior cube.
//!
//! The map is sampled on the ordered simplex `p_1 ≥ p_2 ≥ … ≥ p_n` at cell
//! centers `(i + ½) / R`. Any other point is sorted into the simplex and the
//! answer relabeled back. Procedures with equal length vectors count as one zone.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use base64::Engine;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::codec;
use crate::model::procedure::Procedure;
use crate::model::Permutation;
use crate::optimizer::{find_optimal, PreparedOptimizer};
use crate::probability::{
    length_vector, probability_table, probability_table_f64, ratio_to_f64, EvalMode, LengthVector,
    PriorVector,
};

/// Largest n with a zone map.
pub const ZONE_LIMIT: usize = 4;
/// Largest number of simplex grid points in one map.
pub const GRID_LIMIT: u64 = 20_000_000;

pub fn default_resolution(n: usize) -> u32 {
    match n {
        1 => 64,
        2 => 512,
        3 => 128,
        _ => 32,
    }
}

fn binomial(n: u64, k: u64) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u64, |acc, i| acc * (n - i) / (i + 1))
}

/// Number of non-increasing index tuples of length `n` over `0..r`.
pub fn simplex_grid_len(n: usize, r: u32) -> u64 {
    binomial(r as u64 + n as u64 - 1, n as u64)
}

/// Position of a non-increasing tuple in lexicographic order.
pub fn simplex_rank(tuple: &[u32]) -> u64 {
    let n = tuple.len() as u64;
    tuple
        .iter()
        .enumerate()
        .map(|(k, &i)| binomial(i as u64 + n - 1 - k as u64, n - k as u64))
        .sum()
}

/// All non-increasing tuples over `0..r` in lexicographic order, flattened.
fn simplex_tuples(n: usize, r: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(simplex_grid_len(n, r) as usize * n);
    let mut current = vec![0u32; n];
    fn rec(k: usize, bound: u32, current: &mut Vec<u32>, out: &mut Vec<u32>) {
        if k == current.len() {
            out.extend_from_slice(current);
            return;
        }
        for i in 0..=bound {
            current[k] = i;
            rec(k + 1, i, current, out);
        }
    }
    for i in 0..r {
        current[0] = i;
        rec(1, i, &mut current, &mut out);
    }
    out
}

fn cell_center(i: u32, r: u32) -> f64 {
    (2.0 * i as f64 + 1.0) / (2.0 * r as f64)
}

fn cell_center_exact(i: u32, r: u32) -> BigRational {
    BigRational::new(BigInt::from(2 * i + 1), BigInt::from(2 * r))
}

/// Sorting permutation: `(π·p)[k] = p[π(k)]` is non-increasing, ties by index.
pub fn sorting_permutation(p: &[f64]) -> Permutation {
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    Permutation::new(order).expect("argsort is a permutation")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ZoneOptions {
    pub resolution: u32,
    pub mode: EvalMode,
    /// In float mode, recompute exactly every grid point with a disagreeing neighbour.
    pub refine_boundaries: bool,
}

impl ZoneOptions {
    pub fn new(n: usize) -> Self {
        ZoneOptions {
            resolution: default_resolution(n),
            mode: EvalMode::Float,
            refine_boundaries: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZoneMap {
    n: usize,
    resolution: u32,
    mode: EvalMode,
    refined: bool,
    /// Simplex procedures in order of first appearance on the grid.
    procedures: Vec<Procedure>,
    lengths: Vec<LengthVector>,
    assignment: Vec<u16>,
    /// Every procedure optimal somewhere in the cube, sorted by encoding.
    legend: Vec<Procedure>,
    legend_lengths: Vec<LengthVector>,
}

pub fn compute_metaprocedure(n: usize, options: ZoneOptions) -> Result<ZoneMap> {
    compute_metaprocedure_with_progress(n, options, &|_, _| {})
}

/// `progress(done, total)` is called from worker threads as chunks finish.
pub fn compute_metaprocedure_with_progress(
    n: usize,
    options: ZoneOptions,
    progress: &(dyn Fn(u64, u64) + Sync),
) -> Result<ZoneMap> {
    if n == 0 || n > ZONE_LIMIT {
        return Err(Error::unsupported("zone maps", n, ZONE_LIMIT));
    }
    let r = options.resolution;
    if r < 2 {
        return Err(Error::InvalidArgument("resolution must be at least 2".into()));
    }
    let total = simplex_grid_len(n, r);
    if total > GRID_LIMIT {
        return Err(Error::ResourceExhausted(format!(
            "{total} grid points at resolution {r} exceed the limit of {GRID_LIMIT}"
        )));
    }
    let optimizer = PreparedOptimizer::new(n)?;
    let tuples = simplex_tuples(n, r);
    let done = std::sync::atomic::AtomicU64::new(0);
    const CHUNK: usize = 4096;

    let solve_float = |t: &[u32]| -> Procedure {
        let p: Vec<f64> = t.iter().map(|&i| cell_center(i, r)).collect();
        optimizer.solve_table(&probability_table_f64(&p)).procedure
    };
    let solve_exact = |t: &[u32]| -> Procedure {
        let p = PriorVector::from_exact(t.iter().map(|&i| cell_center_exact(i, r)).collect())
            .expect("cell centers lie in the unit interval");
        optimizer
            .solve_table::<BigRational>(&probability_table(&p).expect("small n"))
            .procedure
    };

    type Chunk = (Vec<u32>, Vec<(LengthVector, Procedure)>);
    let chunks: Vec<Chunk> = tuples
        .par_chunks(CHUNK * n)
        .map(|chunk| {
            let mut local: Vec<(LengthVector, Procedure)> = Vec::new();
            let mut index: HashMap<LengthVector, u32> = HashMap::new();
            let ids = chunk
                .chunks(n)
                .map(|t| {
                    let proc = match options.mode {
                        EvalMode::Float => solve_float(t),
                        EvalMode::Exact => solve_exact(t),
                    };
                    let lv = length_vector(&proc);
                    *index.entry(lv.clone()).or_insert_with(|| {
                        local.push((lv, proc));
                        local.len() as u32 - 1
                    })
                })
                .collect();
            let finished = done.fetch_add((chunk.len() / n) as u64, std::sync::atomic::Ordering::Relaxed);
            progress(finished + (chunk.len() / n) as u64, total);
            (ids, local)
        })
        .collect();

    let mut builder = TableBuilder::default();
    let mut assignment: Vec<u16> = Vec::with_capacity(total as usize);
    for (ids, local) in chunks {
        let map: Vec<u16> = local
            .into_iter()
            .map(|(lv, proc)| builder.intern(lv, proc))
            .collect::<Result<_>>()?;
        assignment.extend(ids.iter().map(|&i| map[i as usize]));
    }

    let refined = options.mode == EvalMode::Float && options.refine_boundaries;
    if refined {
        let suspects: Vec<usize> = (0..total as usize)
            .into_par_iter()
            .filter(|&k| {
                let t = &tuples[k * n..(k + 1) * n];
                neighbours(t, r).any(|j| assignment[j as usize] != assignment[k])
            })
            .collect();
        let exact: Vec<(usize, LengthVector, Procedure)> = suspects
            .par_iter()
            .map(|&k| {
                let proc = solve_exact(&tuples[k * n..(k + 1) * n]);
                (k, length_vector(&proc), proc)
            })
            .collect();
        for (k, lv, proc) in exact {
            assignment[k] = builder.intern(lv, proc)?;
        }
        builder.drop_unused(&mut assignment);
    }

    ZoneMap::from_parts(n, r, options.mode, refined, builder.procedures, assignment)
}

#[derive(Default)]
struct TableBuilder {
    procedures: Vec<Procedure>,
    index: HashMap<LengthVector, u16>,
}

impl TableBuilder {
    fn intern(&mut self, lv: LengthVector, proc: Procedure) -> Result<u16> {
        if let Some(&id) = self.index.get(&lv) {
            return Ok(id);
        }
        let id = u16::try_from(self.procedures.len())
            .map_err(|_| Error::ResourceExhausted("more than 65536 zones".into()))?;
        self.procedures.push(proc);
        self.index.insert(lv, id);
        Ok(id)
    }

    /// Renumbers by first appearance on the grid, dropping procedures no point uses.
    fn drop_unused(&mut self, assignment: &mut [u16]) {
        let mut remap: Vec<Option<u16>> = vec![None; self.procedures.len()];
        let mut kept = Vec::new();
        for id in assignment.iter_mut() {
            let new = *remap[*id as usize].get_or_insert_with(|| {
                kept.push(self.procedures[*id as usize].clone());
                kept.len() as u16 - 1
            });
            *id = new;
        }
        self.procedures = kept;
        self.index.clear();
    }
}

/// Grid ranks of the valid tuples one step away along a coordinate.
fn neighbours(t: &[u32], r: u32) -> impl Iterator<Item = u64> + '_ {
    let n = t.len();
    (0..n).flat_map(move |k| {
        let mut out = [None, None];
        let up_ok = t[k] + 1 < r && (k == 0 || t[k] < t[k - 1]);
        let down_ok = t[k] > 0 && (k + 1 == n || t[k] > t[k + 1]);
        let mut v = t.to_vec();
        if up_ok {
            v[k] += 1;
            out[0] = Some(simplex_rank(&v));
            v[k] -= 1;
        }
        if down_ok {
            v[k] -= 1;
            out[1] = Some(simplex_rank(&v));
        }
        out.into_iter().flatten()
    })
}

impl ZoneMap {
    fn from_parts(
        n: usize,
        resolution: u32,
        mode: EvalMode,
        refined: bool,
        procedures: Vec<Procedure>,
        assignment: Vec<u16>,
    ) -> Result<Self> {
        let lengths: Vec<LengthVector> = procedures.iter().map(length_vector).collect();
        let (legend, legend_lengths) = full_cube_table(n, &procedures);
        Ok(ZoneMap {
            n,
            resolution,
            mode,
            refined,
            procedures,
            lengths,
            assignment,
            legend,
            legend_lengths,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn resolution(&self) -> u32 {
        self.resolution
    }

    pub fn mode(&self) -> EvalMode {
        self.mode
    }

    pub fn grid_len(&self) -> usize {
        self.assignment.len()
    }

    /// Procedures optimal somewhere on the simplex, by first appearance.
    pub fn simplex_procedures(&self) -> &[Procedure] {
        &self.procedures
    }

    pub fn assignment(&self) -> &[u16] {
        &self.assignment
    }

    /// Every procedure optimal somewhere in the cube, sorted by text encoding.
    pub fn legend(&self) -> &[Procedure] {
        &self.legend
    }

    /// Number of zones in the whole cube.
    pub fn zone_count(&self) -> usize {
        self.legend.len()
    }

    /// Procedure stored for a grid tuple (non-increasing, each below the resolution).
    pub fn at(&self, tuple: &[u32]) -> Result<&Procedure> {
        if tuple.len() != self.n
            || tuple.windows(2).any(|w| w[0] < w[1])
            || tuple.iter().any(|&i| i >= self.resolution)
        {
            return Err(Error::InvalidArgument(format!(
                "{tuple:?} is not a simplex grid tuple at resolution {}",
                self.resolution
            )));
        }
        Ok(&self.procedures[self.assignment[simplex_rank(tuple) as usize] as usize])
    }

    /// Nearest-grid procedure for a prior point.
    pub fn lookup(&self, p: &[f64]) -> Result<Procedure> {
        let sigma = self.check_point(p)?;
        let sorted = sigma.act_on(p);
        let tuple: Vec<u32> = sorted
            .iter()
            .map(|&x| ((x * self.resolution as f64).floor() as i64).clamp(0, self.resolution as i64 - 1) as u32)
            .collect();
        self.at(&tuple)?.apply_permutation(&sigma)
    }

    /// Index of [`lookup`](Self::lookup)'s answer in the legend.
    pub fn lookup_id(&self, p: &[f64]) -> Result<usize> {
        let lv = length_vector(&self.lookup(p)?);
        Ok(self
            .legend_lengths
            .iter()
            .position(|l| *l == lv)
            .expect("every relabeled zone procedure is in the legend"))
    }

    /// Best legend procedure at `p`, evaluated exactly at the point rather than
    /// read from the grid. Ties go to the earlier legend entry.
    pub fn evaluate_metaprocedure(&self, p: &[f64]) -> Result<(Procedure, f64)> {
        self.check_point(p)?;
        let table = probability_table_f64(p);
        let (k, v) = self
            .legend_lengths
            .iter()
            .map(|lv| lv.evaluate_with(&table))
            .enumerate()
            .fold((0, f64::INFINITY), |best, (k, v)| if v < best.1 { (k, v) } else { best });
        Ok((self.legend[k].clone(), v))
    }

    fn check_point(&self, p: &[f64]) -> Result<Permutation> {
        if p.len() != self.n {
            return Err(Error::SizeMismatch {
                expected: self.n,
                actual: p.len(),
            });
        }
        if let Some(i) = p.iter().position(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::PriorOutOfRange {
                index: i + 1,
                value: p[i].to_string(),
            });
        }
        Ok(sorting_permutation(p))
    }

    pub fn to_file(&self) -> ZoneMapFile {
        let procedures: Vec<String> = self.procedures.iter().map(|p| p.to_string()).collect();
        let bytes: Vec<u8> = self.assignment.iter().flat_map(|id| id.to_le_bytes()).collect();
        let mut file = ZoneMapFile {
            n: self.n,
            resolution: self.resolution,
            domain: "simplex".into(),
            seed: 0,
            mode: self.mode,
            refined: self.refined,
            procedures,
            assignment: base64::engine::general_purpose::STANDARD.encode(&bytes),
            checksum: String::new(),
        };
        file.checksum = file.digest();
        file
    }

    pub fn from_file(file: &ZoneMapFile) -> Result<Self> {
        let corrupt = |m: String| Error::CorruptZoneMap(m);
        if file.checksum != file.digest() {
            return Err(corrupt("checksum mismatch".into()));
        }
        if file.domain != "simplex" {
            return Err(corrupt(format!("unsupported domain '{}'", file.domain)));
        }
        if file.n == 0 || file.n > ZONE_LIMIT || file.resolution < 2 {
            return Err(corrupt("bad header".into()));
        }
        let procedures = file
            .procedures
            .iter()
            .map(|t| codec::decode(t))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| corrupt(format!("bad procedure: {e}")))?;
        if procedures.iter().any(|p| p.n() != file.n) {
            return Err(corrupt("procedure size differs from header".into()));
        }
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(&file.assignment)
            .map_err(|e| corrupt(e.to_string()))?;
        if bytes.len() as u64 != 2 * simplex_grid_len(file.n, file.resolution) {
            return Err(corrupt("assignment length does not match the grid".into()));
        }
        let assignment: Vec<u16> = bytes
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
            .collect();
        if assignment.iter().any(|&id| id as usize >= procedures.len()) {
            return Err(corrupt("assignment refers to a missing procedure".into()));
        }
        let map = Self::from_parts(file.n, file.resolution, file.mode, file.refined, procedures, assignment)?;
        let distinct: std::collections::HashSet<_> = map.lengths.iter().collect();
        if distinct.len() != map.lengths.len() {
            return Err(corrupt("two table entries have equal length vectors".into()));
        }
        Ok(map)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(&self.to_file())?;
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, json)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: ZoneMapFile = serde_json::from_slice(&std::fs::read(path)?)?;
        Self::from_file(&file)
    }

    pub fn metadata(&self) -> ZoneMapMetadata {
        ZoneMapMetadata {
            n: self.n,
            resolution: self.resolution,
            domain: "simplex".into(),
            seed: 0,
            mode: self.mode,
            refined: self.refined,
            grid_points: self.grid_len(),
            simplex_procedures: self.procedures.len(),
            zones: self.zone_count(),
            checksum: self.to_file().checksum,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneMapMetadata {
    pub n: usize,
    pub resolution: u32,
    pub domain: String,
    pub seed: u64,
    pub mode: EvalMode,
    pub refined: bool,
    pub grid_points: usize,
    pub simplex_procedures: usize,
    pub zones: usize,
    pub checksum: String,
}

/// On-disk form. `assignment` is base64 of little-endian `u16` ids in grid order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneMapFile {
    pub n: usize,
    pub resolution: u32,
    pub domain: String,
    pub seed: u64,
    pub mode: EvalMode,
    #[serde(default)]
    pub refined: bool,
    pub procedures: Vec<String>,
    pub assignment: String,
    pub checksum: String,
}

impl ZoneMapFile {
    /// SHA-256 over every field except the checksum itself.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        let mode = match self.mode {
            EvalMode::Float => "float",
            EvalMode::Exact => "exact",
        };
        h.update(format!(
            "{}|{}|{}|{}|{}|{}|",
            self.n, self.resolution, self.domain, self.seed, mode, self.refined
        ));
        for p in &self.procedures {
            h.update(p.as_bytes());
            h.update(b";");
        }
        h.update(self.assignment.as_bytes());
        hex::encode(h.finalize())
    }
}

/// Closure of the simplex table under relabeling, one procedure per length
/// vector (the least encoding), sorted by encoding.
fn full_cube_table(n: usize, procedures: &[Procedure]) -> (Vec<Procedure>, Vec<LengthVector>) {
    let mut by_lv: HashMap<LengthVector, Procedure> = HashMap::new();
    for sigma in Permutation::all(n) {
        for proc in procedures {
            let image = proc.apply_permutation(&sigma).expect("sizes match");
            let lv = length_vector(&image);
            match by_lv.get(&lv) {
                Some(kept) if kept.to_string() <= image.to_string() => {}
                _ => {
                    by_lv.insert(lv, image);
                }
            }
        }
    }
    let sorted: BTreeMap<String, (Procedure, LengthVector)> = by_lv
        .into_iter()
        .map(|(lv, p)| (p.to_string(), (p, lv)))
        .collect();
    sorted.into_values().unzip()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Orbit {
    /// The member with the least encoding.
    pub representative: Procedure,
    pub size: usize,
}

/// Groups the cube's zones into orbits under relabeling of samples, largest
/// orbits first.
pub fn orbit_census(map: &ZoneMap) -> Vec<Orbit> {
    let n = map.n();
    let perms = Permutation::all(n);
    let mut seen = std::collections::HashSet::new();
    let mut orbits = Vec::new();
    for (proc, lv) in map.legend.iter().zip(&map.legend_lengths) {
        if seen.contains(lv) {
            continue;
        }
        let members: std::collections::HashSet<LengthVector> =
            perms.iter().map(|s| lv.permuted(s)).collect();
        let size = members.len();
        seen.extend(members);
        orbits.push(Orbit {
            representative: proc.clone(),
            size,
        });
    }
    orbits.sort_by(|a, b| {
        b.size
            .cmp(&a.size)
            .then_with(|| a.representative.to_string().cmp(&b.representative.to_string()))
    });
    orbits
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Plane {
    /// Coordinate `axis` (0-based) fixed to `value`.
    Axis { axis: usize, value: f64 },
    /// `x + y + z = sum`.
    Diagonal { sum: f64 },
}

impl std::str::FromStr for Plane {
    type Err = Error;

    /// `x=0.3`, `y=…`, `z=0.17` or `d=1.2`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("plane '{s}' is not of the form z=0.17 or d=1.5"));
        let (name, value) = s.split_once('=').ok_or_else(bad)?;
        let value: f64 = value.trim().parse().map_err(|_| bad())?;
        match name.trim() {
            "x" => Ok(Plane::Axis { axis: 0, value }),
            "y" => Ok(Plane::Axis { axis: 1, value }),
            "z" => Ok(Plane::Axis { axis: 2, value }),
            "d" => Ok(Plane::Diagonal { sum: value }),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for Plane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Plane::Axis { axis, value } => write!(f, "{}={value}", ["x", "y", "z"][*axis]),
            Plane::Diagonal { sum } => write!(f, "d={sum}"),
        }
    }
}

/// Zone ids on a plane, row-major with `rows` rows of `cols` cells. `None`
/// marks cells whose point falls outside the cube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceGrid {
    pub plane: String,
    pub rows: usize,
    pub cols: usize,
    pub ids: Vec<Option<u16>>,
    /// Encodings of the legend; ids index into it.
    pub legend: Vec<String>,
}

impl SliceGrid {
    pub fn distinct_ids(&self) -> std::collections::BTreeSet<u16> {
        self.ids.iter().flatten().copied().collect()
    }

    /// One line per row, ids separated by commas, empty for outside cells.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.ids.chunks(self.cols) {
            let cells: Vec<String> = row
                .iter()
                .map(|c| c.map(|id| id.to_string()).unwrap_or_default())
                .collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

const DIAGONAL_HALF_WIDTH: f64 = 0.816_496_580_927_726; // sqrt(2/3)

/// Samples a plane of an n = 3 map on a `res × res` grid of cell centers.
/// Axis planes use the two free coordinates in index order (row = second).
/// Diagonal planes use the in-plane basis `(1,−1,0)/√2`, `(1,1,−2)/√6`
/// around the point `(s/3, s/3, s/3)`.
pub fn slice(map: &ZoneMap, plane: Plane, res: usize) -> Result<SliceGrid> {
    if map.n() != 3 {
        return Err(Error::InvalidArgument("slices need an n = 3 zone map".into()));
    }
    if res == 0 || res > 4096 {
        return Err(Error::InvalidArgument("slice resolution must be in 1..=4096".into()));
    }
    match plane {
        Plane::Axis { value, .. } if !(0.0..=1.0).contains(&value) => {
            return Err(Error::InvalidArgument(format!("plane {plane} lies outside the cube")))
        }
        Plane::Diagonal { sum } if !(0.0..=3.0).contains(&sum) => {
            return Err(Error::InvalidArgument(format!("plane {plane} lies outside the cube")))
        }
        _ => {}
    }
    let e1 = [1.0 / 2f64.sqrt(), -1.0 / 2f64.sqrt(), 0.0];
    let e2 = [1.0 / 6f64.sqrt(), 1.0 / 6f64.sqrt(), -2.0 / 6f64.sqrt()];
    let center = |i: usize| (i as f64 + 0.5) / res as f64;
    let ids = (0..res * res)
        .into_par_iter()
        .map(|k| {
            let (row, col) = (k / res, k % res);
            let (u, v) = (center(col), center(row));
            let point = match plane {
                Plane::Axis { axis, value } => {
                    let mut p = [0.0; 3];
                    let free: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
                    p[axis] = value;
                    p[free[0]] = u;
                    p[free[1]] = v;
                    p
                }
                Plane::Diagonal { sum } => {
                    let a = (2.0 * u - 1.0) * DIAGONAL_HALF_WIDTH;
                    let b = (2.0 * v - 1.0) * DIAGONAL_HALF_WIDTH;
                    [0, 1, 2].map(|i| sum / 3.0 + a * e1[i] + b * e2[i])
                }
            };
            if point.iter().any(|x| !(0.0..=1.0).contains(x)) {
                return Ok(None);
            }
            map.lookup_id(&point).map(|id| Some(id as u16))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SliceGrid {
        plane: plane.to_string(),
        rows: res,
        cols: res,
        ids,
        legend: map.legend().iter().map(|p| p.to_string()).collect(),
    })
}

/// The whole square of an n = 2 map on a `res × res` grid of cell centers,
/// x1 along columns and x2 along rows.
pub fn square_grid(map: &ZoneMap, res: usize) -> Result<SliceGrid> {
    if map.n() != 2 {
        return Err(Error::InvalidArgument("square grids need an n = 2 zone map".into()));
    }
    if res == 0 || res > 4096 {
        return Err(Error::InvalidArgument("grid resolution must be in 1..=4096".into()));
    }
    let center = |i: usize| (i as f64 + 0.5) / res as f64;
    let ids = (0..res * res)
        .into_par_iter()
        .map(|k| map.lookup_id(&[center(k % res), center(k / res)]).map(|id| Some(id as u16)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SliceGrid {
        plane: "full".into(),
        rows: res,
        cols: res,
        ids,
        legend: map.legend().iter().map(|p| p.to_string()).collect(),
    })
}

/// The two-sample zones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ZoneTag {
    /// Test each sample alone.
    A,
    /// Pool both, then sample 2 alone: optimal below the diagonal.
    B,
    /// Pool both, then sample 1 alone: optimal above the diagonal.
    C,
}

impl fmt::Display for ZoneTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Closed-form zone boundaries for two samples.
pub struct FrontierN2;

impl FrontierN2 {
    pub const NAIVE: &'static str = "P{1}[P{2}[L(00),L(01)],P{2}[L(10),L(11)]]";
    pub const POOL_RIGHT: &'static str = "P{1,2}[L(00),P{2}[L(10),P{1}[L(01),L(11)]]]";
    pub const POOL_LEFT: &'static str = "P{1,2}[L(00),P{1}[L(01),P{2}[L(10),L(11)]]]";

    /// `x2` on the A/B frontier.
    pub fn a_b(x1: f64) -> f64 {
        (1.0 - x1) / (2.0 - x1)
    }

    /// `x2` on the A/C frontier.
    pub fn a_c(x1: f64) -> f64 {
        (1.0 - 2.0 * x1) / (1.0 - x1)
    }

    pub fn triple_point() -> f64 {
        (3.0 - 5f64.sqrt()) / 2.0
    }

    /// Expected lengths `(A, B, C)` at `(x1, x2)`.
    pub fn lengths(x1: f64, x2: f64) -> (f64, f64, f64) {
        (
            2.0,
            1.0 + 2.0 * x2 + x1 - x1 * x2,
            1.0 + x2 - x1 * x2 + 2.0 * x1,
        )
    }

    pub fn procedure(tag: ZoneTag) -> Procedure {
        let text = match tag {
            ZoneTag::A => Self::NAIVE,
            ZoneTag::B => Self::POOL_RIGHT,
            ZoneTag::C => Self::POOL_LEFT,
        };
        codec::decode(text).expect("constant encodings are valid")
    }

    pub fn tag_of(proc: &Procedure) -> Option<ZoneTag> {
        let lv = length_vector(proc);
        [ZoneTag::A, ZoneTag::B, ZoneTag::C]
            .into_iter()
            .find(|&t| length_vector(&Self::procedure(t)) == lv)
    }

    /// Distance-like gap to the nearest frontier branch that bounds a zone:
    /// vertical for the two curves, `|x1 − x2|` for the diagonal.
    pub fn frontier_gap(x1: f64, x2: f64) -> f64 {
        let t = Self::triple_point();
        let mut gap = f64::INFINITY;
        if x1 >= t {
            gap = gap.min((x2 - Self::a_b(x1)).abs());
        }
        if x1 <= t {
            gap = gap.min((x2 - Self::a_c(x1)).abs());
        }
        if x1.min(x2) <= t {
            gap = gap.min((x1 - x2).abs());
        }
        gap
    }
}

/// Analytic two-sample zone. On a frontier the tag follows the optimizer's
/// tie-break: naive before pooling, pool-left before pool-right.
pub fn classify_n2(p: &PriorVector) -> Result<ZoneTag> {
    if p.n() != 2 {
        return Err(Error::SizeMismatch {
            expected: 2,
            actual: p.n(),
        });
    }
    let (x1, x2) = (&p.exact_values()[0], &p.exact_values()[1]);
    let one = BigRational::one();
    let two = &one + &one;
    if x1 > x2 {
        // pool-right beats naive iff x2 (2 − x1) < 1 − x1
        if x2 * (&two - x1) < &one - x1 {
            return Ok(ZoneTag::B);
        }
    } else if x2 * (&one - x1) < &one - &two * x1 {
        return Ok(ZoneTag::C);
    }
    Ok(ZoneTag::A)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Boundary {
    /// Position along the segment, 0 at the first endpoint.
    pub t: f64,
    pub point: Vec<f64>,
    pub exact_point: Vec<BigRational>,
    pub first: Procedure,
    pub second: Procedure,
}

/// Bisects exactly for the point of the segment `p1 → p2` where two procedures
/// have equal expected length. Without explicit procedures, the optimal ones
/// at the endpoints are used.
pub fn refine_boundary(
    p1: &PriorVector,
    p2: &PriorVector,
    procedures: Option<(&Procedure, &Procedure)>,
    tolerance: f64,
) -> Result<Boundary> {
    if p1.n() != p2.n() {
        return Err(Error::SizeMismatch {
            expected: p1.n(),
            actual: p2.n(),
        });
    }
    if tolerance.is_nan() || tolerance <= 0.0 {
        return Err(Error::InvalidArgument("tolerance must be positive".into()));
    }
    let (first, second) = match procedures {
        Some((a, b)) => (a.clone(), b.clone()),
        None => (
            find_optimal::<BigRational>(p1)?.procedure,
            find_optimal::<BigRational>(p2)?.procedure,
        ),
    };
    let (la, lb) = (length_vector(&first), length_vector(&second));
    if la == lb {
        return Err(Error::InvalidArgument(
            "both endpoints have the same procedure; there is no boundary between them".into(),
        ));
    }
    let point_at = |t: &BigRational| -> Result<PriorVector> {
        let coords = p1
            .exact_values()
            .iter()
            .zip(p2.exact_values())
            .map(|(a, b)| a + (b - a) * t)
            .collect();
        PriorVector::from_exact(coords)
    };
    let diff = |t: &BigRational| -> Result<BigRational> {
        let p = point_at(t)?;
        Ok(la.evaluate::<BigRational>(&p)? - lb.evaluate::<BigRational>(&p)?)
    };
    let mut lo = BigRational::zero();
    let mut hi = BigRational::one();
    let d_lo = diff(&lo)?;
    let d_hi = diff(&hi)?;
    if d_lo.is_zero() {
        hi = lo.clone();
    } else if d_hi.is_zero() {
        lo = hi.clone();
    } else if d_lo.is_positive() == d_hi.is_positive() {
        return Err(Error::InvalidArgument(
            "the two procedures do not change order along the segment".into(),
        ));
    }
    let half = BigRational::new(1.into(), 2.into());
    while ratio_to_f64(&(&hi - &lo)) > tolerance {
        let mid = (&lo + &hi) * &half;
        let d = diff(&mid)?;
        if d.is_zero() {
            lo = mid.clone();
            hi = mid;
            break;
        }
        if d.is_positive() == d_lo.is_positive() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t = (&lo + &hi) * &half;
    let exact_point = point_at(&t)?.exact_values().to_vec();
    Ok(Boundary {
        t: ratio_to_f64(&t),
        point: exact_point.iter().map(ratio_to_f64).collect(),
        exact_point,
        first,
        second,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simplex_ranks_follow_enumeration() {
        for (n, r) in [(1, 5), (2, 7), (3, 6), (4, 5)] {
            let tuples = simplex_tuples(n, r);
            assert_eq!(tuples.len() as u64, simplex_grid_len(n, r) * n as u64);
            for (k, t) in tuples.chunks(n).enumerate() {
                assert_eq!(simplex_rank(t), k as u64, "{t:?}");
            }
        }
    }

    #[test]
    fn sorting_permutation_orders_descending() {
        let p = [0.2, 0.7, 0.2, 0.9];
        let sigma = sorting_permutation(&p);
        assert_eq!(sigma.act_on(&p), vec![0.9, 0.7, 0.2, 0.2]);
    }

    #[test]
    fn two_sample_map_has_three_zones() {
        let map = compute_metaprocedure(2, ZoneOptions { resolution: 64, ..ZoneOptions::new(2) }).unwrap();
        assert_eq!(map.zone_count(), 3);
        let orbits = orbit_census(&map);
        let sizes: Vec<usize> = orbits.iter().map(|o| o.size).collect();
        assert_eq!(sizes, vec![2, 1]);
        assert_eq!(FrontierN2::tag_of(&map.lookup(&[0.9, 0.95]).unwrap()), Some(ZoneTag::A));
        assert_eq!(FrontierN2::tag_of(&map.lookup(&[0.1, 0.2]).unwrap()), Some(ZoneTag::C));
        assert_eq!(FrontierN2::tag_of(&map.lookup(&[0.2, 0.1]).unwrap()), Some(ZoneTag::B));

        let grid = square_grid(&map, 8).unwrap();
        assert_eq!(grid.distinct_ids().len(), 3);
        assert!(grid.ids.iter().all(Option::is_some));
        // top-right cell (0.9375, 0.9375) is the naive zone
        let id = grid.ids[63].unwrap() as usize;
        assert_eq!(FrontierN2::tag_of(&map.legend()[id]), Some(ZoneTag::A));
        assert!(slice(&map, Plane::Axis { axis: 2, value: 0.5 }, 4).is_err());
    }

    #[test]
    fn classify_examples() {
        let p = |s: &str| PriorVector::parse(s).unwrap().0;
        assert_eq!(classify_n2(&p("0.9,0.9")).unwrap(), ZoneTag::A);
        assert_eq!(classify_n2(&p("0.1,0.2")).unwrap(), ZoneTag::C);
        assert_eq!(classify_n2(&p("0.2,0.1")).unwrap(), ZoneTag::B);
        let t = FrontierN2::triple_point();
        let (a, b, c) = FrontierN2::lengths(t, t);
        assert!((a - b).abs() < 1e-12 && (a - c).abs() < 1e-12);
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let map = compute_metaprocedure(2, ZoneOptions { resolution: 16, ..ZoneOptions::new(2) }).unwrap();
        let file = map.to_file();
        assert_eq!(ZoneMap::from_file(&file).unwrap(), map);
        let mut bad = file.clone();
        bad.resolution = 17;
        assert!(matches!(ZoneMap::from_file(&bad), Err(Error::CorruptZoneMap(_))));
        let mut bad = file;
        bad.checksum = "00".into();
        assert!(matches!(ZoneMap::from_file(&bad), Err(Error::CorruptZoneMap(_))));
    }

    #[test]
    fn boundary_on_the_diagonal() {
        let p = |s: &str| PriorVector::parse(s).unwrap().0;
        let b = refine_boundary(&p("0.3,0.3"), &p("0.5,0.5"), None, 1e-12).unwrap();
        let t = FrontierN2::triple_point();
        assert!((b.point[0] - t).abs() < 1e-9 && (b.point[1] - t).abs() < 1e-9);
        let b = refine_boundary(&p("0.1,0.2"), &p("0.2,0.1"), None, 1e-12).unwrap();
        assert!((b.point[0] - 0.15).abs() < 1e-9 && (b.point[0] - b.point[1]).abs() < 1e-12);
        assert!(refine_boundary(&p("0.9,0.9"), &p("0.8,0.95"), None, 1e-12).is_err());
    }

    #[test]
    fn plane_parsing() {
        assert_eq!("z=0.17".parse::<Plane>().unwrap(), Plane::Axis { axis: 2, value: 0.17 });
        assert_eq!("d=1.5".parse::<Plane>().unwrap(), Plane::Diagonal { sum: 1.5 });
        assert!("w=1".parse::<Plane>().is_err());
    }
}
