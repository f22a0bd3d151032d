//! Manufactured solution on the two-square domain, its source terms and a
//! finite-difference check of those sources.

use std::f64::consts::PI;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use thiserror::Error;

use crate::assembly::{ExactFields, FieldData, ParameterSet, SourceTerms};
use crate::mesh::Point;

#[derive(Debug, Error, PartialEq)]
pub enum MmsError {
    #[error("the manufactured solution has exactly one network, got {0}")]
    NetworkCount(usize),
    #[error("frequency mu_el / (mu_f (1 - alpha)) is not finite for alpha = {0}")]
    Frequency(f64),
    #[error("point {point:?} is closer than {margin} to the boundary or the interface")]
    TooClose { point: Point, margin: f64 },
    #[error("finite-difference step must be positive, got {0}")]
    Step(f64),
}

/// Closed-form `d`, `p_E`, `u`, `p` with `Phi = sin(pi x) sin(pi y) - cos(pi x) cos(pi y) = -cos(pi (x + y))`.
#[derive(Clone, Debug)]
pub struct Manufactured {
    pub params: ParameterSet,
    /// `mu_el / (mu_f (1 - alpha_E))`
    pub eta: f64,
    cd: f64,
    cu: f64,
    k: f64,
}

impl Manufactured {
    pub fn new(params: ParameterSet) -> Result<Self, MmsError> {
        if params.n_networks() != 1 {
            return Err(MmsError::NetworkCount(params.n_networks()));
        }
        let net = &params.networks[0];
        let eta = params.mu_el / (params.mu_f * (1.0 - net.alpha));
        if !eta.is_finite() {
            return Err(MmsError::Frequency(net.alpha));
        }
        Ok(Manufactured {
            cd: PI * net.permeability / eta,
            cu: PI * net.permeability / params.mu_el,
            k: params.mu_f * net.permeability / params.mu_el,
            eta,
            params,
        })
    }

    /// Unit coefficients with the given Biot coefficient.
    pub fn unit(alpha: f64) -> Result<Self, MmsError> {
        Self::new(ParameterSet::single_network(alpha))
    }

    fn a(&self, t: f64) -> f64 {
        (self.eta * t).cos() - (self.eta * t).sin()
    }

    fn a_dt(&self, t: f64) -> f64 {
        -self.eta * ((self.eta * t).sin() + (self.eta * t).cos())
    }

    fn c(&self, t: f64) -> f64 {
        2.0 * (self.eta * t).cos()
    }

    fn p_amp(&self, t: f64) -> f64 {
        1.5 * (self.eta * t).cos() - 0.5 * (self.eta * t).sin()
    }

    fn phi(x: Point) -> f64 {
        -(PI * (x[0] + x[1])).cos()
    }

    /// Both partial derivatives of `Phi` are equal.
    fn phi_d(x: Point) -> f64 {
        PI * (PI * (x[0] + x[1])).sin()
    }

    /// `Delta Phi`
    fn phi_lap(x: Point) -> f64 {
        2.0 * PI * PI * (PI * (x[0] + x[1])).cos()
    }

    fn q(&self, x: Point) -> f64 {
        PI * x[0] * (PI * x[1]).cos() + 2.0 * PI * PI * self.k * (PI * x[1]).sin()
    }

    fn q_grad(&self, x: Point) -> [f64; 2] {
        [
            PI * (PI * x[1]).cos(),
            -PI * PI * x[0] * (PI * x[1]).sin() + 2.0 * PI.powi(3) * self.k * (PI * x[1]).cos(),
        ]
    }

    fn r(&self, x: Point) -> f64 {
        x[0] * (PI * x[1]).cos() + 4.0 * PI * PI * self.k * (PI * x[1]).sin()
    }

    fn r_grad(&self, x: Point) -> [f64; 2] {
        [
            (PI * x[1]).cos(),
            -PI * x[0] * (PI * x[1]).sin() + 4.0 * PI.powi(3) * self.k * (PI * x[1]).cos(),
        ]
    }

    pub fn d(&self, t: f64, x: Point) -> [f64; 2] {
        let v = self.a(t) * self.cd * Self::phi(x);
        [v, -v]
    }

    pub fn d_dt(&self, t: f64, x: Point) -> [f64; 2] {
        let v = self.a_dt(t) * self.cd * Self::phi(x);
        [v, -v]
    }

    pub fn p_e(&self, t: f64, x: Point) -> f64 {
        -self.a(t) * self.q(x)
    }

    pub fn p_e_dt(&self, t: f64, x: Point) -> f64 {
        -self.a_dt(t) * self.q(x)
    }

    pub fn u(&self, t: f64, x: Point) -> [f64; 2] {
        let v = self.c(t) * self.cu * Self::phi(x);
        [-v, v]
    }

    pub fn p(&self, t: f64, x: Point) -> f64 {
        -self.p_amp(t) * self.r(x)
    }

    pub fn p_grad(&self, t: f64, x: Point) -> [f64; 2] {
        let g = self.r_grad(x);
        let a = -self.p_amp(t);
        [a * g[0], a * g[1]]
    }

    pub fn p_e_grad(&self, t: f64, x: Point) -> [f64; 2] {
        let g = self.q_grad(x);
        let a = -self.a(t);
        [a * g[0], a * g[1]]
    }

    /// `f_el = -div sigma(d) + alpha grad p_E`; `d` is divergence free.
    pub fn f_el(&self, t: f64, x: Point) -> [f64; 2] {
        let lap = self.a(t) * self.cd * Self::phi_lap(x);
        let gp = self.p_e_grad(t, x);
        let alpha = self.params.networks[0].alpha;
        let mu = self.params.mu_el;
        [-mu * lap + alpha * gp[0], mu * lap + alpha * gp[1]]
    }

    /// `g_E = c dt p_E - kappa/mu Delta p_E + beta_e p_E`, using `Delta Q = -pi^2 Q`.
    pub fn g_e(&self, t: f64, x: Point) -> f64 {
        let net = &self.params.networks[0];
        let q = self.q(x);
        -net.storage * self.a_dt(t) * q
            - net.conductivity() * PI * PI * self.a(t) * q
            - net.external_exchange * self.a(t) * q
    }

    /// `f_f = -div tau(u) + grad p`; `u` is divergence free.
    pub fn f_f(&self, t: f64, x: Point) -> [f64; 2] {
        let lap = self.c(t) * self.cu * Self::phi_lap(x);
        let gp = self.p_grad(t, x);
        let mu = self.params.mu_f;
        [mu * lap + gp[0], -mu * lap + gp[1]]
    }
}

/// Time derivatives of the manufactured fields.
#[derive(Clone, Copy, Debug)]
pub struct Rates<'a>(pub &'a Manufactured);

impl FieldData for Rates<'_> {
    fn displacement(&self, t: f64, x: Point) -> [f64; 2] {
        self.0.d_dt(t, x)
    }
    fn pressures(&self, t: f64, x: Point, out: &mut [f64]) {
        out[0] = self.0.p_e_dt(t, x);
    }
    fn velocity(&self, t: f64, x: Point) -> [f64; 2] {
        let v = -2.0 * self.0.eta * (self.0.eta * t).sin() * self.0.cu * Manufactured::phi(x);
        [-v, v]
    }
    fn stokes_pressure(&self, t: f64, x: Point) -> f64 {
        let e = self.0.eta;
        e * (1.5 * (e * t).sin() + 0.5 * (e * t).cos()) * self.0.r(x)
    }
}

impl FieldData for Manufactured {
    fn displacement(&self, t: f64, x: Point) -> [f64; 2] {
        self.d(t, x)
    }
    fn pressures(&self, t: f64, x: Point, out: &mut [f64]) {
        out[0] = self.p_e(t, x);
    }
    fn velocity(&self, t: f64, x: Point) -> [f64; 2] {
        self.u(t, x)
    }
    fn stokes_pressure(&self, t: f64, x: Point) -> f64 {
        self.p(t, x)
    }
}

impl ExactFields for Manufactured {
    fn displacement_grad(&self, t: f64, x: Point) -> [[f64; 2]; 2] {
        let g = self.a(t) * self.cd * Self::phi_d(x);
        [[g, g], [-g, -g]]
    }
    fn pressure_grads(&self, t: f64, x: Point, out: &mut [[f64; 2]]) {
        out[0] = self.p_e_grad(t, x);
    }
    fn velocity_grad(&self, t: f64, x: Point) -> [[f64; 2]; 2] {
        let g = self.c(t) * self.cu * Self::phi_d(x);
        [[-g, -g], [g, g]]
    }
}

impl SourceTerms for Manufactured {
    fn elastic_force(&self, t: f64, x: Point) -> [f64; 2] {
        self.f_el(t, x)
    }
    fn network_sources(&self, t: f64, x: Point, out: &mut [f64]) {
        out[0] = self.g_e(t, x);
    }
    fn fluid_force(&self, t: f64, x: Point) -> [f64; 2] {
        self.f_f(t, x)
    }
}

/// Absolute residual of one equation and the magnitude of its largest term.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FdResidual {
    pub residual: f64,
    pub scale: f64,
}

impl FdResidual {
    pub fn relative(&self) -> f64 {
        if self.scale > 0.0 {
            self.residual / self.scale
        } else {
            self.residual
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FdResiduals {
    pub elastic: FdResidual,
    pub network: FdResidual,
    pub fluid: FdResidual,
    /// `|div u|`, absolute.
    pub divergence: f64,
}

fn norm2(v: [f64; 2]) -> f64 {
    v[0].hypot(v[1])
}

/// Fourth-order central differences of a scalar function.
struct Stencil<'a> {
    f: &'a dyn Fn(Point) -> f64,
    h: f64,
}

impl Stencil<'_> {
    fn d1(&self, x: Point, dir: usize) -> f64 {
        let at = |k: f64| {
            let mut y = x;
            y[dir] += k * self.h;
            (self.f)(y)
        };
        (-at(2.0) + 8.0 * at(1.0) - 8.0 * at(-1.0) + at(-2.0)) / (12.0 * self.h)
    }

    fn d2(&self, x: Point, a: usize, b: usize) -> f64 {
        if a != b {
            let inner = |y: Point| self.d1(y, b);
            let outer = Stencil {
                f: &inner,
                h: self.h,
            };
            return outer.d1(x, a);
        }
        let at = |k: f64| {
            let mut y = x;
            y[a] += k * self.h;
            (self.f)(y)
        };
        (-at(2.0) + 16.0 * at(1.0) - 30.0 * at(0.0) + 16.0 * at(-1.0) - at(-2.0))
            / (12.0 * self.h * self.h)
    }

    fn hessian(&self, x: Point) -> [[f64; 2]; 2] {
        let xy = self.d2(x, 0, 1);
        [[self.d2(x, 0, 0), xy], [xy, self.d2(x, 1, 1)]]
    }

    fn grad(&self, x: Point) -> [f64; 2] {
        [self.d1(x, 0), self.d1(x, 1)]
    }
}

fn check_margin(x: Point, margin: f64, sub_left: bool) -> Result<(), MmsError> {
    let (lo, hi) = if sub_left { (-0.5, 0.0) } else { (0.0, 0.5) };
    if x[0] - lo < margin || hi - x[0] < margin || x[1] < margin || 0.5 - x[1] < margin {
        return Err(MmsError::TooClose { point: x, margin });
    }
    Ok(())
}

/// Strong-form residuals of the elastic, network, Stokes momentum and continuity
/// equations, built from finite differences of the exact fields and compared
/// against `sources`. `x_el` and `x_f` must lie at least `2 step` inside their squares.
pub fn verify_sources_fd(
    exact: &Manufactured,
    sources: &dyn SourceTerms,
    t: f64,
    x_el: Point,
    x_f: Point,
    step: f64,
) -> Result<FdResiduals, MmsError> {
    if !(step > 0.0) {
        return Err(MmsError::Step(step));
    }
    check_margin(x_el, 2.0 * step, true)?;
    check_margin(x_f, 2.0 * step, false)?;
    let prm = &exact.params;
    let net = &prm.networks[0];

    let d0 = |y: Point| exact.d(t, y)[0];
    let d1 = |y: Point| exact.d(t, y)[1];
    let hd = [
        Stencil { f: &d0, h: step }.hessian(x_el),
        Stencil { f: &d1, h: step }.hessian(x_el),
    ];
    let pe = |y: Point| exact.p_e(t, y);
    let spe = Stencil { f: &pe, h: step };
    let gpe = spe.grad(x_el);
    let hpe = spe.hessian(x_el);

    // div sigma = mu Delta d + (mu + lambda) grad div d
    let mut div_sigma = [0.0; 2];
    for (i, ds) in div_sigma.iter_mut().enumerate() {
        let lap = hd[i][0][0] + hd[i][1][1];
        let grad_div = hd[0][i][0] + hd[1][i][1];
        *ds = prm.mu_el * lap + (prm.mu_el + prm.lambda) * grad_div;
    }
    let f = sources.elastic_force(t, x_el);
    let r_el = [
        -div_sigma[0] + net.alpha * gpe[0] - f[0],
        -div_sigma[1] + net.alpha * gpe[1] - f[1],
    ];
    let elastic = FdResidual {
        residual: norm2(r_el),
        scale: norm2(div_sigma).max(net.alpha * norm2(gpe)).max(norm2(f)),
    };

    let dt0 = |y: Point| exact.d_dt(t, y)[0];
    let dt1 = |y: Point| exact.d_dt(t, y)[1];
    let div_ddt =
        Stencil { f: &dt0, h: step }.d1(x_el, 0) + Stencil { f: &dt1, h: step }.d1(x_el, 1);
    let mut g = [0.0];
    sources.network_sources(t, x_el, &mut g);
    let terms = [
        net.storage * exact.p_e_dt(t, x_el),
        net.alpha * div_ddt,
        -net.conductivity() * (hpe[0][0] + hpe[1][1]),
        net.external_exchange * exact.p_e(t, x_el),
    ];
    let network = FdResidual {
        residual: (terms.iter().sum::<f64>() - g[0]).abs(),
        scale: terms.iter().fold(g[0].abs(), |m, v| m.max(v.abs())),
    };

    let u0 = |y: Point| exact.u(t, y)[0];
    let u1 = |y: Point| exact.u(t, y)[1];
    let su = [Stencil { f: &u0, h: step }, Stencil { f: &u1, h: step }];
    let hu = [su[0].hessian(x_f), su[1].hessian(x_f)];
    let pf = |y: Point| exact.p(t, y);
    let gp = Stencil { f: &pf, h: step }.grad(x_f);
    let mut div_tau = [0.0; 2];
    for (i, dt) in div_tau.iter_mut().enumerate() {
        let lap = hu[i][0][0] + hu[i][1][1];
        let grad_div = hu[0][i][0] + hu[1][i][1];
        *dt = prm.mu_f * (lap + grad_div);
    }
    let ff = sources.fluid_force(t, x_f);
    let r_f = [-div_tau[0] + gp[0] - ff[0], -div_tau[1] + gp[1] - ff[1]];
    let fluid = FdResidual {
        residual: norm2(r_f),
        scale: norm2(div_tau).max(norm2(gp)).max(norm2(ff)),
    };

    let divergence = (su[0].d1(x_f, 0) + su[1].d1(x_f, 1)).abs();
    Ok(FdResiduals {
        elastic,
        network,
        fluid,
        divergence,
    })
}

/// Worst residuals of [`verify_sources_fd`] over random points.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SourceCheck {
    pub points: usize,
    pub max_elastic: f64,
    pub max_network: f64,
    pub max_fluid: f64,
    pub max_divergence: f64,
}

impl SourceCheck {
    pub fn passes(&self, rel_tol: f64, div_tol: f64) -> bool {
        self.max_elastic <= rel_tol
            && self.max_network <= rel_tol
            && self.max_fluid <= rel_tol
            && self.max_divergence <= div_tol
    }
}

/// Relative tolerance of the source check.
pub const SOURCE_REL_TOL: f64 = 1e-5;
/// Absolute tolerance on `|div u|` in the source check.
pub const DIVERGENCE_TOL: f64 = 1e-10;
/// Step of the source check.
pub const SOURCE_FD_STEP: f64 = 1e-4;

/// Runs the finite-difference check at `points` seeded random points and times in `[0, t_max]`.
pub fn check_sources(
    exact: &Manufactured,
    sources: &dyn SourceTerms,
    points: usize,
    t_max: f64,
    seed: u64,
) -> Result<SourceCheck, MmsError> {
    let mut rng = StdRng::seed_from_u64(seed);
    let m = 2.0 * SOURCE_FD_STEP * 1.01;
    let mut out = SourceCheck {
        points,
        ..Default::default()
    };
    for _ in 0..points {
        let t = rng.gen_range(0.0..=t_max);
        let y0 = rng.gen_range(m..0.5 - m);
        let y1 = rng.gen_range(m..0.5 - m);
        let x_el = [rng.gen_range(-0.5 + m..-m), y0];
        let x_f = [rng.gen_range(m..0.5 - m), y1];
        let r = verify_sources_fd(exact, sources, t, x_el, x_f, SOURCE_FD_STEP)?;
        out.max_elastic = out.max_elastic.max(r.elastic.relative());
        out.max_network = out.max_network.max(r.network.relative());
        out.max_fluid = out.max_fluid.max(r.fluid.relative());
        out.max_divergence = out.max_divergence.max(r.divergence);
    }
    Ok(out)
}

/// Magnitudes of the three interface residuals of the exact solution at `(0, y)`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct InterfaceResiduals {
    /// `|-sigma n_el + alpha p_E n_el - p_E n_el|`
    pub displacement: f64,
    /// `|-kappa/mu grad p_E . n_el + dt d . n_el + u . n_f|`
    pub flux: f64,
    /// `|-tau n_f + p n_f - p_E n_f|`
    pub velocity: f64,
}

pub fn interface_residuals(exact: &Manufactured, t: f64, y: f64) -> InterfaceResiduals {
    let x = [0.0, y];
    let n_el = [1.0, 0.0];
    let n_f = [-1.0, 0.0];
    let prm = &exact.params;
    let net = &prm.networks[0];
    let gd = exact.displacement_grad(t, x);
    let div = gd[0][0] + gd[1][1];
    let mut sigma = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            sigma[i][j] =
                prm.mu_el * (gd[i][j] + gd[j][i]) + if i == j { prm.lambda * div } else { 0.0 };
        }
    }
    let pe = exact.p_e(t, x);
    let rd: Vec<f64> = (0..2)
        .map(|i| {
            -(sigma[i][0] * n_el[0] + sigma[i][1] * n_el[1]) + net.alpha * pe * n_el[i]
                - pe * n_el[i]
        })
        .collect();
    let gp = exact.p_e_grad(t, x);
    let ddt = exact.d_dt(t, x);
    let u = exact.u(t, x);
    let flux = -net.conductivity() * (gp[0] * n_el[0] + gp[1] * n_el[1])
        + ddt[0] * n_el[0]
        + ddt[1] * n_el[1]
        + u[0] * n_f[0]
        + u[1] * n_f[1];
    let gu = exact.velocity_grad(t, x);
    let p = exact.p(t, x);
    let ru: Vec<f64> = (0..2)
        .map(|i| {
            let tau_n: f64 = (0..2)
                .map(|j| prm.mu_f * (gu[i][j] + gu[j][i]) * n_f[j])
                .sum();
            -tau_n + p * n_f[i] - pe * n_f[i]
        })
        .collect();
    InterfaceResiduals {
        displacement: rd[0].hypot(rd[1]),
        flux: flux.abs(),
        velocity: ru[0].hypot(ru[1]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> Manufactured {
        Manufactured::unit(0.5).unwrap()
    }

    #[test]
    fn frequency_under_unit_parameters() {
        assert!((unit().eta - 2.0).abs() < 1e-15);
    }

    #[test]
    fn spot_values() {
        let m = unit();
        let d = m.d(0.0, [-0.25, 0.25]);
        assert!((d[0] + PI / 2.0).abs() < 1e-12 && (d[1] - PI / 2.0).abs() < 1e-12);
        // Phi vanishes on x + y = 1/2 and equals -1 on x + y = 0
        let u = m.u(0.0, [0.25, 0.25]);
        assert!(u[0].abs() < 1e-12 && u[1].abs() < 1e-12);
        let u = m.u(0.0, [0.0, 0.0]);
        assert!((u[0] - 2.0 * PI).abs() < 1e-12 && (u[1] + 2.0 * PI).abs() < 1e-12);
        assert!((m.p_e(0.0, [0.0, 0.5]) + 2.0 * PI * PI).abs() < 1e-12);
    }

    #[test]
    fn rejects_multiple_networks_and_alpha_one() {
        let mut p = ParameterSet::single_network(0.5);
        p.networks.push(p.networks[0].clone());
        assert_eq!(Manufactured::new(p).unwrap_err(), MmsError::NetworkCount(2));
        assert!(matches!(
            Manufactured::unit(1.0),
            Err(MmsError::Frequency(_))
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let m = unit();
        let h = 1e-6;
        let x = [0.13, 0.31];
        let t = 0.4;
        let gd = m.displacement_grad(t, x);
        let gu = m.velocity_grad(t, x);
        let gp = m.p_e_grad(t, x);
        for dir in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[dir] += h;
            xm[dir] -= h;
            for c in 0..2 {
                assert!(((m.d(t, xp)[c] - m.d(t, xm)[c]) / (2.0 * h) - gd[c][dir]).abs() < 1e-6);
                assert!(((m.u(t, xp)[c] - m.u(t, xm)[c]) / (2.0 * h) - gu[c][dir]).abs() < 1e-6);
            }
            assert!(((m.p_e(t, xp) - m.p_e(t, xm)) / (2.0 * h) - gp[dir]).abs() < 1e-6);
        }
        assert!(((m.d(t + h, x)[0] - m.d(t - h, x)[0]) / (2.0 * h) - m.d_dt(t, x)[0]).abs() < 1e-6);
    }

    #[test]
    fn velocity_is_divergence_free() {
        let m = unit();
        for &x in &[[0.1, 0.2], [0.4, 0.05], [0.33, 0.44]] {
            let g = m.velocity_grad(0.3, x);
            assert!((g[0][0] + g[1][1]).abs() < 1e-10);
        }
    }

    #[test]
    fn sources_pass_the_fd_check() {
        let m = unit();
        let c = check_sources(&m, &m, 100, 1.0, 7).unwrap();
        assert!(c.passes(SOURCE_REL_TOL, DIVERGENCE_TOL), "{c:?}");
    }

    #[test]
    fn fd_check_detects_a_corrupted_source() {
        struct Shifted<'a>(&'a Manufactured);
        impl SourceTerms for Shifted<'_> {
            fn elastic_force(&self, t: f64, x: Point) -> [f64; 2] {
                self.0.f_el(t, x)
            }
            fn network_sources(&self, t: f64, x: Point, out: &mut [f64]) {
                out[0] = self.0.g_e(t, x);
            }
            fn fluid_force(&self, t: f64, x: Point) -> [f64; 2] {
                let f = self.0.f_f(t, x);
                [f[0] + 1.0, f[1]]
            }
        }
        let m = unit();
        let r = verify_sources_fd(&m, &Shifted(&m), 0.0, [-0.2, 0.2], [0.2, 0.2], 1e-4).unwrap();
        assert!((r.fluid.residual - 1.0).abs() < 1e-4);
        assert!(r.elastic.relative() < 1e-5);
    }

    #[test]
    fn fd_check_rejects_points_near_the_interface() {
        let m = unit();
        let r = verify_sources_fd(&m, &m, 0.0, [-1e-5, 0.2], [0.2, 0.2], 1e-4);
        assert!(matches!(r, Err(MmsError::TooClose { .. })));
    }

    #[test]
    fn exact_solution_satisfies_the_interface_conditions() {
        let m = unit();
        for &y in &[0.1, 0.25, 0.4] {
            let r = interface_residuals(&m, 0.2, y);
            assert!(
                r.displacement < 1e-12 && r.flux < 1e-12 && r.velocity < 1e-12,
                "{r:?}"
            );
        }
    }
}
