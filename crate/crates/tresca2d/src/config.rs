//! Run configuration: a flat `key = value` text format with `#` comments.
//! Numeric values and arc endpoints are parsed with the expression grammar,
//! so entries like `gammaD = [2pi/3,4pi/3];[5pi/3,7pi/3]` work. Serialization
//! round-trips every field.

use crate::expr::{parse_expression, Expression};
use crate::optim::OptimConfig;
use crate::tresca::ProblemData;
use rand::Rng;
use rand::SeedableRng;
use std::fmt::Write as _;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unknown key '{0}'")]
    UnknownKey(String),
    #[error("invalid value for '{key}': {msg}")]
    Value { key: String, msg: String },
    #[error("the friction threshold must be positive: g({x}, {y}) = {val}")]
    NonPositiveThreshold { x: f64, y: f64, val: f64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Full run configuration: geometry, material, data expressions, solver
/// tolerances, optimizer settings, output directory and seed.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub a: f64,
    pub b: f64,
    pub h: f64,
    pub dirichlet_arcs: Vec<(f64, f64)>,
    pub mu: f64,
    pub lambda: f64,
    pub f_x: Expression,
    pub f_y: Expression,
    pub g: Expression,
    pub lin_tol: f64,
    pub lin_max_iter: usize,
    pub switch_tol: f64,
    pub eps_slip: f64,
    pub max_switch_iters: usize,
    pub target_volume: f64,
    pub uzawa_rate: f64,
    pub multiplier0: f64,
    /// Initial step length as a multiple of h.
    pub step0_over_h: f64,
    pub step_shrink: f64,
    pub max_outer_iters: usize,
    pub stop_window: usize,
    pub stop_tol: f64,
    pub min_angle_floor_deg: f64,
    pub snapshot_every: usize,
    /// Optional radius beyond which data expressions are evaluated at a
    /// smoothly clamped radius (off when absent).
    pub cutoff_radius: Option<f64>,
    pub out_dir: String,
    pub seed: u64,
}

impl Default for RunConfig {
    /// The built-in toy problem: ellipse with semi-major axis 1.1, clamped
    /// arcs on the left and lower-right, unit-area constraint.
    fn default() -> Self {
        RunConfig {
            a: 1.1,
            b: 1.0 / 1.1,
            h: 0.05,
            dirichlet_arcs: vec![
                (2.0 * std::f64::consts::PI / 3.0, 4.0 * std::f64::consts::PI / 3.0),
                (5.0 * std::f64::consts::PI / 3.0, 7.0 * std::f64::consts::PI / 3.0),
            ],
            mu: 0.5,
            lambda: 0.0,
            f_x: parse_expression("-5*x*exp(x)").unwrap(),
            f_y: parse_expression("0.6*exp(x^2)").unwrap(),
            g: parse_expression("1+sin(-y*pi/2)+1e-3").unwrap(),
            lin_tol: 1e-10,
            lin_max_iter: 200_000,
            switch_tol: 1e-9,
            eps_slip: 1e-6,
            max_switch_iters: 200,
            target_volume: std::f64::consts::PI,
            uzawa_rate: 1.0,
            multiplier0: 0.0,
            step0_over_h: 0.1,
            step_shrink: 0.5,
            max_outer_iters: 120,
            stop_window: 20,
            stop_tol: 1e-4,
            min_angle_floor_deg: 5.0,
            snapshot_every: 10,
            cutoff_radius: None,
            out_dir: "out".to_string(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn problem_data(&self) -> ProblemData {
        let wrap = |e: &Expression| match self.cutoff_radius {
            Some(r) => windowed(e.clone(), r),
            None => e.clone(),
        };
        let mut pd = ProblemData::new(
            [wrap(&self.f_x), wrap(&self.f_y)],
            wrap(&self.g),
            self.mu,
            self.lambda,
        );
        pd.lin_tol = self.lin_tol;
        pd.lin_max_iter = self.lin_max_iter;
        pd.switch_tol = self.switch_tol;
        pd.eps_slip = self.eps_slip;
        pd.max_switch_iter = self.max_switch_iters;
        pd
    }

    pub fn optim_config(&self) -> OptimConfig {
        OptimConfig {
            target_volume: self.target_volume,
            uzawa_rate: self.uzawa_rate,
            multiplier0: self.multiplier0,
            step0: self.step0_over_h * self.h,
            step_shrink: self.step_shrink,
            max_outer_iters: self.max_outer_iters,
            stop_window: self.stop_window,
            stop_tol: self.stop_tol,
            min_angle_floor: self.min_angle_floor_deg.to_radians(),
            snapshot_every: self.snapshot_every,
        }
    }

    /// Sample the threshold expression over the bounding box and the boundary
    /// ellipse; every sample must be strictly positive.
    pub fn check_threshold_positive(&self) -> Result<(), ConfigError> {
        let pd = self.problem_data();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(self.seed ^ 0x67726176);
        let samples = 10_000usize;
        for k in 0..samples {
            let (x, y) = if k % 2 == 0 {
                // boundary sample
                let t = rng.random_range(0.0..2.0 * std::f64::consts::PI);
                (self.a * t.cos(), self.b * t.sin())
            } else {
                (
                    rng.random_range(-self.a..self.a),
                    rng.random_range(-self.b..self.b),
                )
            };
            let val = pd.g.eval(x, y).map_err(|e| ConfigError::Value {
                key: "g".into(),
                msg: e.to_string(),
            })?;
            if !(val > 0.0) {
                return Err(ConfigError::NonPositiveThreshold { x, y, val });
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Parse {
                    line: lineno + 1,
                    msg: format!("expected 'key = value', found '{line}'"),
                });
            };
            let key = key.trim();
            let value = value.trim();
            cfg.set(key, value).map_err(|e| match e {
                ConfigError::UnknownKey(_) | ConfigError::Value { .. } => e,
                other => ConfigError::Parse { line: lineno + 1, msg: other.to_string() },
            })?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let num = |v: &str| -> Result<f64, ConfigError> {
            let e = parse_expression(v).map_err(|err| ConfigError::Value {
                key: key.to_string(),
                msg: err.to_string(),
            })?;
            e.eval(0.0, 0.0).map_err(|err| ConfigError::Value {
                key: key.to_string(),
                msg: err.to_string(),
            })
        };
        let int = |v: &str| -> Result<usize, ConfigError> {
            num(v).map(|x| x.round() as usize)
        };
        let ex = |v: &str| -> Result<Expression, ConfigError> {
            parse_expression(v).map_err(|err| ConfigError::Value {
                key: key.to_string(),
                msg: err.to_string(),
            })
        };
        match key {
            "a" => self.a = num(value)?,
            "b" => self.b = num(value)?,
            "h" => self.h = num(value)?,
            "gammaD" => {
                let mut arcs = Vec::new();
                for part in value.split(';') {
                    let part = part.trim();
                    let inner = part
                        .strip_prefix('[')
                        .and_then(|s| s.strip_suffix(']'))
                        .ok_or_else(|| ConfigError::Value {
                            key: key.to_string(),
                            msg: format!("arc '{part}' is not of the form [lo,hi]"),
                        })?;
                    let (lo, hi) = inner.split_once(',').ok_or_else(|| ConfigError::Value {
                        key: key.to_string(),
                        msg: format!("arc '{part}' needs two endpoints"),
                    })?;
                    arcs.push((num(lo.trim())?, num(hi.trim())?));
                }
                self.dirichlet_arcs = arcs;
            }
            "mu" => self.mu = num(value)?,
            "lambda" => self.lambda = num(value)?,
            "f_x" => self.f_x = ex(value)?,
            "f_y" => self.f_y = ex(value)?,
            "g" => self.g = ex(value)?,
            "lin_tol" => self.lin_tol = num(value)?,
            "lin_max_iter" => self.lin_max_iter = int(value)?,
            "switch_tol" => self.switch_tol = num(value)?,
            "eps_slip" => self.eps_slip = num(value)?,
            "max_switch_iters" => self.max_switch_iters = int(value)?,
            "target_volume" => self.target_volume = num(value)?,
            "uzawa_rate" => self.uzawa_rate = num(value)?,
            "multiplier0" => self.multiplier0 = num(value)?,
            "step0_over_h" => self.step0_over_h = num(value)?,
            "step_shrink" => self.step_shrink = num(value)?,
            "max_outer_iters" => self.max_outer_iters = int(value)?,
            "stop_window" => self.stop_window = int(value)?,
            "stop_tol" => self.stop_tol = num(value)?,
            "min_angle_floor_deg" => self.min_angle_floor_deg = num(value)?,
            "snapshot_every" => self.snapshot_every = int(value)?,
            "cutoff_radius" => {
                self.cutoff_radius = if value == "off" { None } else { Some(num(value)?) }
            }
            "out_dir" => self.out_dir = value.to_string(),
            "seed" => self.seed = int(value)? as u64,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "a = {}", self.a);
        let _ = writeln!(s, "b = {}", self.b);
        let _ = writeln!(s, "h = {}", self.h);
        let arcs: Vec<String> = self
            .dirichlet_arcs
            .iter()
            .map(|(lo, hi)| format!("[{},{}]", lo, hi))
            .collect();
        let _ = writeln!(s, "gammaD = {}", arcs.join(";"));
        let _ = writeln!(s, "mu = {}", self.mu);
        let _ = writeln!(s, "lambda = {}", self.lambda);
        let _ = writeln!(s, "f_x = {}", self.f_x);
        let _ = writeln!(s, "f_y = {}", self.f_y);
        let _ = writeln!(s, "g = {}", self.g);
        let _ = writeln!(s, "lin_tol = {}", self.lin_tol);
        let _ = writeln!(s, "lin_max_iter = {}", self.lin_max_iter);
        let _ = writeln!(s, "switch_tol = {}", self.switch_tol);
        let _ = writeln!(s, "eps_slip = {}", self.eps_slip);
        let _ = writeln!(s, "max_switch_iters = {}", self.max_switch_iters);
        let _ = writeln!(s, "target_volume = {}", self.target_volume);
        let _ = writeln!(s, "uzawa_rate = {}", self.uzawa_rate);
        let _ = writeln!(s, "multiplier0 = {}", self.multiplier0);
        let _ = writeln!(s, "step0_over_h = {}", self.step0_over_h);
        let _ = writeln!(s, "step_shrink = {}", self.step_shrink);
        let _ = writeln!(s, "max_outer_iters = {}", self.max_outer_iters);
        let _ = writeln!(s, "stop_window = {}", self.stop_window);
        let _ = writeln!(s, "stop_tol = {}", self.stop_tol);
        let _ = writeln!(s, "min_angle_floor_deg = {}", self.min_angle_floor_deg);
        let _ = writeln!(s, "snapshot_every = {}", self.snapshot_every);
        match self.cutoff_radius {
            Some(r) => {
                let _ = writeln!(s, "cutoff_radius = {}", r);
            }
            None => {
                let _ = writeln!(s, "cutoff_radius = off");
            }
        }
        let _ = writeln!(s, "out_dir = {}", self.out_dir);
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }
}

/// Wrap an expression so that beyond `radius` it is evaluated at a smoothly
/// clamped radial position (constant along rays far away).
fn windowed(inner: Expression, radius: f64) -> Expression {
    // r = sqrt(x^2 + y^2); rho(r) = r for r <= radius smoothly saturating at
    // 1.5 radius; evaluate inner at x * rho/r, y * rho/r. Realized by AST
    // substitution so the result stays an ordinary expression.
    let r2 = parse_expression("x^2+y^2").unwrap();
    let scale_expr = Expression::Call(
        crate::expr::Function::Sqrt,
        Box::new(Expression::Binary(
            crate::expr::BinOp::Div,
            Box::new(clamp_expr(r2.clone(), radius)),
            Box::new(Expression::Binary(
                crate::expr::BinOp::Add,
                Box::new(r2),
                Box::new(Expression::Literal(1e-30)),
            )),
        )),
    );
    substitute_scaled(inner, &scale_expr)
}

/// Smoothly clamped squared radius: a rational blend
/// `rho^2 = (1 - w) r^2 + w radius^2` with `w = s^4 / (1 + s^4)`,
/// `s = r^2 / radius^2`. Identity to fourth order inside the window,
/// saturating at the window radius far away; smooth everywhere.
fn clamp_expr(r2: Expression, radius: f64) -> Expression {
    use crate::expr::BinOp::*;
    let rr = radius * radius;
    let s = Expression::Binary(Div, Box::new(r2.clone()), Box::new(Expression::Literal(rr)));
    let s4 = Expression::Pow(Box::new(s), 4);
    let w = Expression::Binary(
        Div,
        Box::new(s4.clone()),
        Box::new(Expression::Binary(
            Add,
            Box::new(Expression::Literal(1.0)),
            Box::new(s4),
        )),
    );
    // r2 + w (rr - r2)
    Expression::Binary(
        Add,
        Box::new(r2.clone()),
        Box::new(Expression::Binary(
            Mul,
            Box::new(w),
            Box::new(Expression::Binary(
                Sub,
                Box::new(Expression::Literal(rr)),
                Box::new(r2),
            )),
        )),
    )
}

fn substitute_scaled(e: Expression, scale: &Expression) -> Expression {
    use crate::expr::Expression as E;
    match e {
        E::Var(v) => E::Binary(
            crate::expr::BinOp::Mul,
            Box::new(E::Var(v)),
            Box::new(scale.clone()),
        ),
        E::Unary(inner) => E::Unary(Box::new(substitute_scaled(*inner, scale))),
        E::Binary(op, a, b) => E::Binary(
            op,
            Box::new(substitute_scaled(*a, scale)),
            Box::new(substitute_scaled(*b, scale)),
        ),
        E::Pow(base, n) => E::Pow(Box::new(substitute_scaled(*base, scale)), n),
        E::Call(f, arg) => E::Call(f, Box::new(substitute_scaled(*arg, scale))),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrip_is_identity() {
        let cfg = RunConfig::default();
        let text = cfg.serialize();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg.a, back.a);
        assert_eq!(cfg.b, back.b);
        assert_eq!(cfg.h, back.h);
        assert_eq!(cfg.dirichlet_arcs, back.dirichlet_arcs);
        assert_eq!(cfg.mu, back.mu);
        assert_eq!(cfg.lambda, back.lambda);
        assert_eq!(cfg.f_x, back.f_x);
        assert_eq!(cfg.f_y, back.f_y);
        assert_eq!(cfg.g, back.g);
        assert_eq!(cfg.lin_tol, back.lin_tol);
        assert_eq!(cfg.lin_max_iter, back.lin_max_iter);
        assert_eq!(cfg.switch_tol, back.switch_tol);
        assert_eq!(cfg.eps_slip, back.eps_slip);
        assert_eq!(cfg.max_switch_iters, back.max_switch_iters);
        assert_eq!(cfg.target_volume, back.target_volume);
        assert_eq!(cfg.uzawa_rate, back.uzawa_rate);
        assert_eq!(cfg.multiplier0, back.multiplier0);
        assert_eq!(cfg.step0_over_h, back.step0_over_h);
        assert_eq!(cfg.step_shrink, back.step_shrink);
        assert_eq!(cfg.max_outer_iters, back.max_outer_iters);
        assert_eq!(cfg.stop_window, back.stop_window);
        assert_eq!(cfg.stop_tol, back.stop_tol);
        assert_eq!(cfg.min_angle_floor_deg, back.min_angle_floor_deg);
        assert_eq!(cfg.snapshot_every, back.snapshot_every);
        assert_eq!(cfg.cutoff_radius, back.cutoff_radius);
        assert_eq!(cfg.out_dir, back.out_dir);
        assert_eq!(cfg.seed, back.seed);
        // serialize again: byte-identical
        assert_eq!(text, back.serialize());
    }

    #[test]
    fn parses_paper_style_arcs_and_comments() {
        let text = "\
# toy configuration
a = 1.1
b = 1/1.1
gammaD = [2pi/3,4pi/3];[5pi/3,7pi/3]  # clamped arcs
g = 1+sin(-y*pi/2)+1e-3
";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.a, 1.1);
        assert!((cfg.b - 1.0 / 1.1).abs() < 1e-15);
        assert_eq!(cfg.dirichlet_arcs.len(), 2);
        assert!((cfg.dirichlet_arcs[0].0 - 2.0 * std::f64::consts::PI / 3.0).abs() < 1e-15);
        assert!((cfg.dirichlet_arcs[1].1 - 7.0 * std::f64::consts::PI / 3.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_lines() {
        assert!(matches!(
            RunConfig::parse("bogus = 1"),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            RunConfig::parse("just a line"),
            Err(ConfigError::Parse { .. })
        ));
    }

    #[test]
    fn threshold_positivity_check() {
        let cfg = RunConfig::default();
        cfg.check_threshold_positive().unwrap();
        let mut bad = RunConfig::default();
        bad.g = parse_expression("y").unwrap();
        assert!(matches!(
            bad.check_threshold_positive(),
            Err(ConfigError::NonPositiveThreshold { .. })
        ));
    }

    #[test]
    fn windowed_expressions_agree_inside() {
        let mut cfg = RunConfig::default();
        cfg.cutoff_radius = Some(50.0);
        let pd = cfg.problem_data();
        let raw = RunConfig::default().problem_data();
        for (x, y) in [(0.3, -0.4), (1.0, 0.9), (-1.05, 0.2)] {
            let a = pd.g.eval(x, y).unwrap();
            let b = raw.g.eval(x, y).unwrap();
            assert!((a - b).abs() < 1e-3 * b.abs().max(1.0), "{a} vs {b}");
        }
        // far away the windowed field stays bounded
        let far = pd.f[0].eval(1e6, 0.0).unwrap();
        assert!(far.is_finite());
    }
}
