//! Flat text records of a QP and, optionally, its solution.
//!
//! One `name=values` entry per line, values comma-separated, matrices
//! row-major. Blank lines and lines starting with `#` are ignored.
//!
//! ```text
//! n_x=2
//! n_in=1
//! n_eq=0
//! P=1,0,0,1
//! q=-1,-2
//! G=1,0
//! h=0.5
//! A=
//! b=
//! ```
//!
//! A solved record adds `x_star`, `s`, `z`, `y`, `kkt_residual` and `iterations`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::qp::{QpError, QpProblem, QpSolution};

/// Dimensions above this are rejected before any allocation.
pub const MAX_DIM: usize = 4096;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DumpError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("missing field `{0}`")]
    Missing(&'static str),
    #[error("field `{field}` has {got} values, expected {expected}")]
    Length {
        field: &'static str,
        got: usize,
        expected: usize,
    },
    #[error(transparent)]
    Problem(#[from] QpError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpDump {
    pub problem: QpProblem,
    pub solution: Option<QpSolution>,
}

const PROBLEM_FIELDS: [&str; 9] = ["n_x", "n_in", "n_eq", "P", "q", "G", "h", "A", "b"];
const SOLUTION_FIELDS: [&str; 6] = ["x_star", "s", "z", "y", "kkt_residual", "iterations"];

fn join(values: impl IntoIterator<Item = f64>) -> String {
    let mut out = String::new();
    for (i, v) in values.into_iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "{v:?}");
    }
    out
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.nrows())
        .flat_map(|r| (0..m.ncols()).map(move |c| m[(r, c)]))
        .collect()
}

impl QpDump {
    pub fn new(problem: QpProblem, solution: Option<QpSolution>) -> Self {
        Self { problem, solution }
    }

    pub fn write(&self) -> String {
        let p = &self.problem;
        let (nx, nin, neq) = p.shape();
        let mut out = String::new();
        let _ = writeln!(out, "n_x={nx}");
        let _ = writeln!(out, "n_in={nin}");
        let _ = writeln!(out, "n_eq={neq}");
        let _ = writeln!(out, "P={}", join(row_major(p.p())));
        let _ = writeln!(out, "q={}", join(p.q().iter().copied()));
        let _ = writeln!(out, "G={}", join(row_major(p.g())));
        let _ = writeln!(out, "h={}", join(p.h().iter().copied()));
        let _ = writeln!(out, "A={}", join(row_major(p.a())));
        let _ = writeln!(out, "b={}", join(p.b().iter().copied()));
        if let Some(s) = &self.solution {
            let _ = writeln!(out, "x_star={}", join(s.x_star.iter().copied()));
            let _ = writeln!(out, "s={}", join(s.s.iter().copied()));
            let _ = writeln!(out, "z={}", join(s.z.iter().copied()));
            let _ = writeln!(out, "y={}", join(s.y.iter().copied()));
            let _ = writeln!(out, "kkt_residual={:?}", s.kkt_residual);
            let _ = writeln!(out, "iterations={}", s.iterations);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, DumpError> {
        let mut fields: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let syntax = |message: String| DumpError::Syntax {
                line: i + 1,
                message,
            };
            let (name, values) = line
                .split_once('=')
                .ok_or_else(|| syntax("expected `name=values`".into()))?;
            let name = name.trim();
            if !PROBLEM_FIELDS.contains(&name) && !SOLUTION_FIELDS.contains(&name) {
                return Err(syntax(format!("unknown field `{name}`")));
            }
            if fields.insert(name, (i + 1, values.trim())).is_some() {
                return Err(syntax(format!("duplicate field `{name}`")));
            }
        }

        let dim = |name: &'static str| -> Result<usize, DumpError> {
            let (line, v) = fields.get(name).ok_or(DumpError::Missing(name))?;
            let n = v.parse::<usize>().map_err(|e| DumpError::Syntax {
                line: *line,
                message: format!("bad `{name}`: {e}"),
            })?;
            if n > MAX_DIM {
                return Err(DumpError::Syntax {
                    line: *line,
                    message: format!("`{name}` = {n} exceeds {MAX_DIM}"),
                });
            }
            Ok(n)
        };
        let nx = dim("n_x")?;
        let nin = dim("n_in")?;
        let neq = dim("n_eq")?;
        let values = |name: &'static str, expected: usize| -> Result<Vec<f64>, DumpError> {
            let (line, v) = fields.get(name).ok_or(DumpError::Missing(name))?;
            let parsed: Vec<f64> = if v.is_empty() {
                Vec::new()
            } else {
                v.split(',')
                    .map(|w| {
                        w.trim().parse::<f64>().map_err(|e| DumpError::Syntax {
                            line: *line,
                            message: format!("bad number `{}` in `{name}`: {e}", w.trim()),
                        })
                    })
                    .collect::<Result<_, _>>()?
            };
            if parsed.len() != expected {
                return Err(DumpError::Length {
                    field: name,
                    got: parsed.len(),
                    expected,
                });
            }
            Ok(parsed)
        };
        let p = DMatrix::from_row_slice(nx, nx, &values("P", nx * nx)?);
        let q = DVector::from_vec(values("q", nx)?);
        let g = DMatrix::from_row_slice(nin, nx, &values("G", nin * nx)?);
        let h = DVector::from_vec(values("h", nin)?);
        let a = DMatrix::from_row_slice(neq, nx, &values("A", neq * nx)?);
        let b = DVector::from_vec(values("b", neq)?);
        let problem = QpProblem::new(p, q, g, h, a, b)?;

        let present = SOLUTION_FIELDS.iter().filter(|f| fields.contains_key(*f)).count();
        let solution = match present {
            0 => None,
            n if n == SOLUTION_FIELDS.len() => {
                let scalar = values("kkt_residual", 1)?[0];
                let (line, it) = fields["iterations"];
                let iterations = it.parse::<usize>().map_err(|e| DumpError::Syntax {
                    line,
                    message: format!("bad `iterations`: {e}"),
                })?;
                Some(QpSolution {
                    x_star: DVector::from_vec(values("x_star", nx)?),
                    s: DVector::from_vec(values("s", nin)?),
                    z: DVector::from_vec(values("z", nin)?),
                    y: DVector::from_vec(values("y", neq)?),
                    kkt_residual: scalar,
                    iterations,
                })
            }
            _ => {
                let missing = SOLUTION_FIELDS
                    .iter()
                    .find(|f| !fields.contains_key(*f))
                    .copied()
                    .unwrap_or("x_star");
                return Err(DumpError::Missing(missing));
            }
        };
        Ok(Self { problem, solution })
    }
}
