//! Uniform time grids, grid-sampled signals and box-shaped control sets.

use std::io::{BufRead, Write};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::norms::{vector_norm, NormKind};

/// Uniform grid `t_j = j T / N`, `j = 0..=N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    horizon: f64,
    steps: usize,
}

impl Grid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(invalid(format!("horizon must be positive and finite, got {horizon}")));
        }
        if steps < 2 {
            return Err(invalid(format!("grid needs at least 2 steps, got {steps}")));
        }
        Ok(Grid { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn step_size(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Node time `t_j`; the last node is exactly `T`.
    pub fn time(&self, j: usize) -> f64 {
        if j >= self.steps {
            self.horizon
        } else {
            self.horizon * j as f64 / self.steps as f64
        }
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.steps).map(|j| self.time(j))
    }

    /// Step index `j` and local coordinate `θ ∈ [0, 1]` with `t = t_j + θ h`.
    pub fn locate(&self, t: f64) -> Result<(usize, f64)> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(Error::OutOfRange { t, horizon: self.horizon });
        }
        let h = self.step_size();
        let j = ((t / h).floor() as usize).min(self.steps - 1);
        let theta = ((t - self.time(j)) / h).clamp(0.0, 1.0);
        Ok((j, theta))
    }
}

/// How a signal is evaluated between nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    /// Holds `values[j]` on `[t_j, t_{j+1})`.
    PiecewiseConstantLeft,
    PiecewiseLinear,
}

/// A vector-valued function of time sampled on a [`Grid`].
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    grid: Grid,
    values: Vec<DVector<f64>>,
    interpolation: Interpolation,
}

impl Signal {
    pub fn new(grid: Grid, values: Vec<DVector<f64>>, interpolation: Interpolation) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(invalid(format!(
                "signal has {} values but the grid has {} nodes",
                values.len(),
                grid.len()
            )));
        }
        let dim = values[0].len();
        for (j, v) in values.iter().enumerate() {
            if v.len() != dim {
                return Err(invalid(format!("signal value {j} has dimension {} != {dim}", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(invalid(format!("signal value {j} is not finite")));
            }
        }
        Ok(Signal { grid, values, interpolation })
    }

    pub fn constant(grid: Grid, value: DVector<f64>, interpolation: Interpolation) -> Result<Self> {
        Signal::new(grid, vec![value; grid.len()], interpolation)
    }

    pub fn from_fn(
        grid: Grid,
        interpolation: Interpolation,
        mut f: impl FnMut(f64) -> DVector<f64>,
    ) -> Result<Self> {
        let values = grid.times().map(&mut f).collect();
        Signal::new(grid, values, interpolation)
    }

    /// Scalar signal from node values.
    pub fn scalar(grid: Grid, values: &[f64], interpolation: Interpolation) -> Result<Self> {
        Signal::new(
            grid,
            values.iter().map(|&v| DVector::from_element(1, v)).collect(),
            interpolation,
        )
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn values(&self) -> &[DVector<f64>] {
        &self.values
    }

    pub fn value(&self, j: usize) -> &DVector<f64> {
        &self.values[j]
    }

    pub fn interpolation(&self) -> Interpolation {
        self.interpolation
    }

    pub fn with_interpolation(mut self, interpolation: Interpolation) -> Self {
        self.interpolation = interpolation;
        self
    }

    /// Value inside step `j` at local coordinate `θ ∈ [0, 1]`.
    ///
    /// For piecewise-constant signals the whole closed step, including its right
    /// end, sees `values[j]`.
    pub fn in_step(&self, j: usize, theta: f64) -> DVector<f64> {
        match self.interpolation {
            Interpolation::PiecewiseConstantLeft => self.values[j].clone(),
            Interpolation::PiecewiseLinear => {
                if theta == 0.0 {
                    self.values[j].clone()
                } else if theta == 1.0 {
                    self.values[j + 1].clone()
                } else {
                    &self.values[j] * (1.0 - theta) + &self.values[j + 1] * theta
                }
            }
        }
    }

    pub fn eval(&self, t: f64) -> Result<DVector<f64>> {
        if t == self.grid.horizon {
            return Ok(self.values[self.grid.steps].clone());
        }
        let (j, theta) = self.grid.locate(t)?;
        Ok(self.in_step(j, theta))
    }

    /// Time reversal: `values[j] ↦ values[N - j]`.
    pub fn reverse(&self) -> Signal {
        Signal {
            grid: self.grid,
            values: self.values.iter().rev().cloned().collect(),
            interpolation: self.interpolation,
        }
    }

    pub fn map_values(&self, mut f: impl FnMut(usize, &DVector<f64>) -> DVector<f64>) -> Result<Signal> {
        let values = self.values.iter().enumerate().map(|(j, v)| f(j, v)).collect();
        Signal::new(self.grid, values, self.interpolation)
    }

    /// Node-wise norms as a scalar signal.
    pub fn norms(&self, kind: &NormKind) -> Result<Vec<f64>> {
        self.values.iter().map(|v| vector_norm(v, kind)).collect()
    }

    /// `max_j ‖s(t_j)‖`.
    pub fn sup_norm(&self, kind: &NormKind) -> Result<f64> {
        Ok(self.norms(kind)?.into_iter().fold(0.0, f64::max))
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        write!(out, "t")?;
        for i in 0..self.dim() {
            write!(out, ",x_{i}")?;
        }
        writeln!(out)?;
        for (t, v) in self.grid.times().zip(&self.values) {
            write!(out, "{t:.16e}")?;
            for x in v.iter() {
                write!(out, ",{x:.16e}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("ascii output")
    }

    /// Parses the CSV written by [`Signal::write_csv`]; the grid is rebuilt from the time column.
    pub fn read_csv<R: BufRead>(input: R, interpolation: Interpolation) -> Result<Signal> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| invalid("empty csv"))?
            .map_err(|e| invalid(e.to_string()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.first() != Some(&"t") {
            return Err(invalid("csv header must start with `t`"));
        }
        let dim = cols.len() - 1;
        let mut times = Vec::new();
        let mut values = Vec::new();
        for line in lines {
            let line = line.map_err(|e| invalid(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let nums: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>().map_err(|e| invalid(format!("bad number `{s}`: {e}"))))
                .collect::<Result<_>>()?;
            if nums.len() != dim + 1 {
                return Err(invalid(format!("row has {} columns, expected {}", nums.len(), dim + 1)));
            }
            times.push(nums[0]);
            values.push(DVector::from_column_slice(&nums[1..]));
        }
        if times.len() < 3 || times[0] != 0.0 {
            return Err(invalid("csv must hold at least 3 rows starting at t = 0"));
        }
        let grid = Grid::new(*times.last().unwrap(), times.len() - 1)?;
        for (j, t) in times.iter().enumerate() {
            if (t - grid.time(j)).abs() > 1e-12 * grid.horizon().max(1.0) {
                return Err(invalid(format!("csv times are not uniform at row {j}")));
            }
        }
        Signal::new(grid, values, interpolation)
    }
}

/// `max_j ‖u(t_j) − v(t_j)‖`, the grid version of the sup-over-time norm.
///
/// For piecewise-linear signals this equals the continuum supremum; for other
/// interpolations it is the node maximum.
pub fn sup_distance(u: &Signal, v: &Signal, kind: &NormKind) -> Result<f64> {
    if u.grid != v.grid {
        return Err(invalid("signals live on different grids"));
    }
    if u.dim() != v.dim() {
        return Err(invalid("signals have different dimensions"));
    }
    let mut best = 0.0_f64;
    for (a, b) in u.values.iter().zip(&v.values) {
        best = best.max(vector_norm(&(a - b), kind)?);
    }
    Ok(best)
}

/// Axis-aligned box `{u : lower ≤ u ≤ upper}` containing the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BoxRepr", into = "BoxRepr")]
pub struct BoxSet {
    lower: DVector<f64>,
    upper: DVector<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoxRepr {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl TryFrom<BoxRepr> for BoxSet {
    type Error = Error;
    fn try_from(r: BoxRepr) -> Result<Self> {
        BoxSet::new(DVector::from_vec(r.lower), DVector::from_vec(r.upper))
    }
}

impl From<BoxSet> for BoxRepr {
    fn from(b: BoxSet) -> Self {
        BoxRepr { lower: b.lower.iter().copied().collect(), upper: b.upper.iter().copied().collect() }
    }
}

impl BoxSet {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(invalid("box bounds must be nonempty and of equal length"));
        }
        for (i, (lo, hi)) in lower.iter().zip(upper.iter()).enumerate() {
            if !(lo.is_finite() && hi.is_finite()) {
                return Err(invalid(format!("box bound {i} is not finite")));
            }
            if lo > hi {
                return Err(invalid(format!("box lower bound exceeds upper bound at {i}")));
            }
            if *lo > 0.0 || *hi < 0.0 {
                return Err(invalid(format!("box must contain the origin (coordinate {i})")));
            }
        }
        Ok(BoxSet { lower, upper })
    }

    /// `[-r, r]^dim`.
    pub fn symmetric(dim: usize, r: f64) -> Result<Self> {
        BoxSet::new(DVector::from_element(dim, -r), DVector::from_element(dim, r))
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    pub fn center(&self) -> DVector<f64> {
        (&self.lower + &self.upper) * 0.5
    }

    pub fn clamp(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(u.len(), |i, _| u[i].clamp(self.lower[i], self.upper[i]))
    }

    pub fn contains(&self, u: &DVector<f64>) -> bool {
        u.len() == self.dim()
            && u.iter().zip(self.lower.iter().zip(self.upper.iter())).all(|(x, (lo, hi))| lo <= x && x <= hi)
    }

    /// Maps a point of the unit cube `[0, 1]^k` into the box.
    pub fn from_unit(&self, s: &[f64]) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| self.lower[i] + s[i] * (self.upper[i] - self.lower[i]))
    }

    /// Box scaled about the origin by `factor ≥ 0`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        BoxSet::new(&self.lower * factor, &self.upper * factor)
    }

    /// `max_{u ∈ box} ‖u‖`; a convex function peaks at a vertex.
    pub fn max_norm(&self, kind: &NormKind) -> Result<f64> {
        let k = self.dim();
        if k > 20 {
            return Err(invalid("box vertex enumeration limited to dimension 20"));
        }
        let mut best = 0.0_f64;
        for mask in 0..(1usize << k) {
            let v = DVector::from_fn(k, |i, _| if (mask >> i) & 1 == 1 { self.upper[i] } else { self.lower[i] });
            best = best.max(vector_norm(&v, kind)?);
        }
        Ok(best)
    }

    pub fn signal_in_box(&self, s: &Signal) -> bool {
        s.values().iter().all(|v| self.contains(v))
    }
}
