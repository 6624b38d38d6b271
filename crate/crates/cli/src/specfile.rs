//! Line-based input for `steady-check`.
//!
//! ```text
//! intersection
//! symmetric
//! tolerance 1e-10
//! direction 0
//! direction 120 0.5     # optional weight; give all or none
//! ```
//!
//! ```text
//! network
//! tolerance 1e-9
//! curve closed density 1.0
//! vertex 1.0 0.0 0.0 1.0
//! ...
//! end
//! patch inside density 0.5 bounded
//! patch outside density 0 unbounded
//! ```

use mesenchymal_core::steady::{Curve, IntersectionSpec, NetworkSpec, Patch, Vertex, BALANCE_TOL};

use crate::CliError;

#[derive(Clone, Debug, PartialEq)]
pub enum SteadySpec {
    Intersection { spec: IntersectionSpec, tolerance: f64 },
    Network(NetworkSpec),
}

const DEFAULT_NETWORK_TOL: f64 = 1e-9;

fn err(line: usize, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("line {line}: {msg}"))
}

fn num(line: usize, what: &str, tok: Option<&str>) -> Result<f64, CliError> {
    let tok = tok.ok_or_else(|| err(line, format!("missing {what}")))?;
    match tok.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(err(line, format!("bad {what} `{tok}`"))),
    }
}

fn no_more<'a>(line: usize, mut toks: impl Iterator<Item = &'a str>) -> Result<(), CliError> {
    match toks.next() {
        Some(t) => Err(err(line, format!("unexpected `{t}`"))),
        None => Ok(()),
    }
}

pub fn parse(text: &str) -> Result<SteadySpec, CliError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());
    let (n, head) = lines.next().ok_or_else(|| CliError::Config("empty spec file".into()))?;
    match head {
        "intersection" => parse_intersection(lines),
        "network" => parse_network(lines),
        other => Err(err(n, format!("expected `intersection` or `network`, got `{other}`"))),
    }
}

fn parse_intersection<'a>(lines: impl Iterator<Item = (usize, &'a str)>) -> Result<SteadySpec, CliError> {
    let mut symmetric = false;
    let mut tolerance = BALANCE_TOL;
    let mut angles = Vec::new();
    let mut weights: Vec<Option<f64>> = Vec::new();
    let mut last = 1;
    for (n, line) in lines {
        last = n;
        let mut t = line.split_whitespace();
        match t.next() {
            Some("symmetric") => symmetric = true,
            Some("tolerance") => {
                tolerance = num(n, "tolerance", t.next())?;
                if tolerance <= 0.0 {
                    return Err(err(n, "tolerance must be positive"));
                }
            }
            Some("direction") => {
                angles.push(num(n, "angle", t.next())?);
                weights.push(t.next().map(|w| num(n, "weight", Some(w))).transpose()?);
            }
            Some(other) => return Err(err(n, format!("unknown directive `{other}`"))),
            None => unreachable!("blank lines are filtered"),
        }
        no_more(n, t)?;
    }
    if angles.len() < 2 {
        return Err(err(last, format!("need at least 2 directions, got {}", angles.len())));
    }
    let weights = match weights.iter().filter(|w| w.is_some()).count() {
        0 => None,
        k if k == weights.len() => Some(weights.into_iter().flatten().collect()),
        _ => return Err(err(last, "give a weight for every direction or for none")),
    };
    Ok(SteadySpec::Intersection { spec: IntersectionSpec::from_degrees(&angles, weights, symmetric), tolerance })
}

fn parse_network<'a>(lines: impl Iterator<Item = (usize, &'a str)>) -> Result<SteadySpec, CliError> {
    let mut net = NetworkSpec { curves: Vec::new(), patches: Vec::new(), tolerance: DEFAULT_NETWORK_TOL };
    let mut open: Option<(usize, Curve)> = None;
    for (n, line) in lines {
        let mut t = line.split_whitespace();
        let head = t.next().unwrap_or_default();
        if let Some((_, curve)) = open.as_mut() {
            match head {
                "vertex" => {
                    let x = num(n, "x", t.next())?;
                    let y = num(n, "y", t.next())?;
                    let tx = num(n, "tangent x", t.next())?;
                    let ty = num(n, "tangent y", t.next())?;
                    curve.vertices.push(Vertex { position: [x, y], tangent: [tx, ty] });
                }
                "end" => net.curves.push(open.take().expect("open curve").1),
                other => return Err(err(n, format!("expected `vertex` or `end` inside a curve, got `{other}`"))),
            }
            no_more(n, t)?;
            continue;
        }
        match head {
            "tolerance" => {
                net.tolerance = num(n, "tolerance", t.next())?;
                if net.tolerance <= 0.0 {
                    return Err(err(n, "tolerance must be positive"));
                }
            }
            "curve" => {
                let mut curve = Curve { vertices: Vec::new(), closed: false, density: 1.0 };
                while let Some(tok) = t.next() {
                    match tok {
                        "closed" => curve.closed = true,
                        "density" => curve.density = num(n, "density", t.next())?,
                        other => return Err(err(n, format!("unexpected `{other}`"))),
                    }
                }
                if curve.density < 0.0 {
                    return Err(err(n, "density must be nonnegative"));
                }
                open = Some((n, curve));
            }
            "patch" => {
                let label = t.next().ok_or_else(|| err(n, "missing patch label"))?.to_string();
                if t.next() != Some("density") {
                    return Err(err(n, "expected `patch <label> density <value> bounded|unbounded`"));
                }
                let density = num(n, "density", t.next())?;
                if density < 0.0 {
                    return Err(err(n, "density must be nonnegative"));
                }
                let bounded = match t.next() {
                    Some("bounded") => true,
                    Some("unbounded") => false,
                    _ => return Err(err(n, "expected `bounded` or `unbounded`")),
                };
                net.patches.push(Patch { label, density, bounded });
            }
            "vertex" | "end" => return Err(err(n, format!("`{head}` outside a curve"))),
            other => return Err(err(n, format!("unknown directive `{other}`"))),
        }
        no_more(n, t)?;
    }
    if let Some((n, _)) = open {
        return Err(err(n, "curve is missing its `end`"));
    }
    Ok(SteadySpec::Network(net))
}
