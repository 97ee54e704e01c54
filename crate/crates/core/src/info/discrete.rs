//! Exact total-correlation oracles on enumerable discrete joints.

use crate::error::{Error, Result};
use crate::rng::Rng;

use super::ENUMERATION_GUARD;

/// Which group of variables an operation ranges over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    X,
    Z,
}

/// A joint distribution over (x_1..x_d, z_1..z_m), stored as a dense table
/// in row-major mixed radix with the x variables first.
#[derive(Clone, Debug)]
pub struct DiscreteJoint {
    x_card: Vec<usize>,
    z_card: Vec<usize>,
    table: Vec<f64>,
}

fn entropy_of_table(p: &[f64]) -> f64 {
    p.iter().map(|&v| if v > 0.0 { -v * v.ln() } else { 0.0 }).sum()
}

impl DiscreteJoint {
    pub fn new(x_card: Vec<usize>, z_card: Vec<usize>, table: Vec<f64>) -> Result<Self> {
        let states: usize = x_card.iter().chain(z_card.iter()).product();
        if states > ENUMERATION_GUARD {
            return Err(Error::EnumerationGuard { states, guard: ENUMERATION_GUARD });
        }
        if table.len() != states {
            return Err(Error::InvalidArgument(format!(
                "table length {} does not match {} states",
                table.len(),
                states
            )));
        }
        if table.iter().any(|&p| p < 0.0) {
            return Err(Error::InvalidArgument("negative probability".into()));
        }
        let sum: f64 = table.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("table sums to {sum}, not 1")));
        }
        Ok(DiscreteJoint { x_card, z_card, table })
    }

    /// Joint built from a marginal p(x) and a factorized encoder
    /// p(z|x) = prod_i p(z_i | x); `encoders[i]` is indexed `[x_state][z_i]`.
    pub fn from_encoder(x_card: Vec<usize>, p_x: &[f64], encoders: &[Vec<Vec<f64>>]) -> Result<Self> {
        let x_states: usize = x_card.iter().product();
        if p_x.len() != x_states {
            return Err(Error::InvalidArgument("p_x length mismatch".into()));
        }
        let z_card: Vec<usize> = encoders.iter().map(|e| e[0].len()).collect();
        let z_states: usize = z_card.iter().product();
        let mut table = vec![0.0; x_states * z_states];
        for xs in 0..x_states {
            for zs in 0..z_states {
                let mut p = p_x[xs];
                let mut rem = zs;
                // z index is row-major: z_1 is the slowest
                for (i, &k) in z_card.iter().enumerate().rev() {
                    let zi = rem % k;
                    rem /= k;
                    p *= encoders[i][xs][zi];
                }
                table[xs * z_states + zs] = p;
            }
        }
        DiscreteJoint::new(x_card, z_card, table)
    }

    /// Random joint from the conditionally factorized family
    /// p(x, z) = p(z) prod_i p(x_i | z), with a dense (dependent) random
    /// p(z). On this family TC(x|z) = 0 exactly, so TC(x;z) = TC(x) >= 0
    /// holds as an identity and the oracle suite's tolerances measure pure
    /// enumeration roundoff.
    pub fn random_generative(x_card: Vec<usize>, z_card: Vec<usize>, rng: &mut Rng) -> Result<Self> {
        let z_states: usize = z_card.iter().product();
        let mut p_z: Vec<f64> = (0..z_states).map(|_| (2.0 * rng.uniform() - 1.0).exp()).collect();
        let s: f64 = p_z.iter().sum();
        for p in &mut p_z {
            *p /= s;
        }
        // p(x_i | z state), indexed [i][z_state][x_i]
        let cond: Vec<Vec<Vec<f64>>> = x_card
            .iter()
            .map(|&c| {
                (0..z_states)
                    .map(|_| {
                        let mut row: Vec<f64> =
                            (0..c).map(|_| (2.0 * rng.uniform() - 1.0).exp()).collect();
                        let s: f64 = row.iter().sum();
                        for p in &mut row {
                            *p /= s;
                        }
                        row
                    })
                    .collect()
            })
            .collect();
        let x_states: usize = x_card.iter().product();
        let mut table = vec![0.0; x_states * z_states];
        for xs in 0..x_states {
            for zs in 0..z_states {
                let mut p = p_z[zs];
                let mut rem = xs;
                for (i, &c) in x_card.iter().enumerate().rev() {
                    let xi = rem % c;
                    rem /= c;
                    p *= cond[i][zs][xi];
                }
                table[xs * z_states + zs] = p;
            }
        }
        let total: f64 = table.iter().sum();
        for p in &mut table {
            *p /= total;
        }
        DiscreteJoint::new(x_card, z_card, table)
    }

    /// Uniformly random joint over the given cardinalities (normalized
    /// exponentials keep every entry strictly positive).
    pub fn random(x_card: Vec<usize>, z_card: Vec<usize>, rng: &mut Rng) -> Result<Self> {
        let states: usize = x_card.iter().chain(z_card.iter()).product();
        let mut table: Vec<f64> = (0..states).map(|_| (2.0 * rng.uniform() - 1.0).exp()).collect();
        let sum: f64 = table.iter().sum();
        for p in &mut table {
            *p /= sum;
        }
        // renormalize exactly once more to push the sum within 1e-12 of 1
        let sum: f64 = table.iter().sum();
        for p in &mut table {
            *p /= sum;
        }
        DiscreteJoint::new(x_card, z_card, table)
    }

    pub fn x_count(&self) -> usize {
        self.x_card.len()
    }

    pub fn z_count(&self) -> usize {
        self.z_card.len()
    }

    pub fn x_states(&self) -> usize {
        self.x_card.iter().product()
    }

    pub fn z_states(&self) -> usize {
        self.z_card.iter().product()
    }

    fn all_card(&self) -> Vec<usize> {
        self.x_card.iter().chain(self.z_card.iter()).copied().collect()
    }

    /// Marginal table over a subset of variable positions (into the
    /// concatenated x ++ z index space), in the order given.
    fn marginal(&self, vars: &[usize]) -> Vec<f64> {
        let card = self.all_card();
        let out_size: usize = vars.iter().map(|&v| card[v]).product();
        let mut out = vec![0.0; out_size];
        // strides of each variable in the full table
        let n = card.len();
        let mut strides = vec![1usize; n];
        for i in (0..n - 1).rev() {
            strides[i] = strides[i + 1] * card[i + 1];
        }
        for (flat, &p) in self.table.iter().enumerate() {
            let mut idx = 0;
            for &v in vars {
                let digit = (flat / strides[v]) % card[v];
                idx = idx * card[v] + digit;
            }
            out[idx] += p;
        }
        out
    }

    /// Entropy (nats) of the marginal over the given variable positions.
    pub fn entropy(&self, vars: &[usize]) -> f64 {
        entropy_of_table(&self.marginal(vars))
    }

    fn x_vars(&self) -> Vec<usize> {
        (0..self.x_count()).collect()
    }

    fn z_vars(&self) -> Vec<usize> {
        (self.x_count()..self.x_count() + self.z_count()).collect()
    }

    /// Mutual information I(A : B) between two groups of variable positions.
    pub fn mutual_information(&self, a: &[usize], b: &[usize]) -> f64 {
        let mut ab = a.to_vec();
        ab.extend_from_slice(b);
        self.entropy(a) + self.entropy(b) - self.entropy(&ab)
    }

    /// Total correlation of the x side or z side:
    /// sum_i H(v_i) - H(v), exhaustively.
    pub fn total_correlation(&self, side: Side) -> f64 {
        let vars = match side {
            Side::X => self.x_vars(),
            Side::Z => self.z_vars(),
        };
        let sum_h: f64 = vars.iter().map(|&v| self.entropy(&[v])).sum();
        sum_h - self.entropy(&vars)
    }

    /// Conditional total correlation TC(x | z) = sum_i H(x_i|z) - H(x|z).
    pub fn conditional_tc(&self) -> f64 {
        let z = self.z_vars();
        let h_z = self.entropy(&z);
        let mut sum_h_cond = 0.0;
        for xi in self.x_vars() {
            let mut v = vec![xi];
            v.extend_from_slice(&z);
            sum_h_cond += self.entropy(&v) - h_z;
        }
        let mut all = self.x_vars();
        all.extend_from_slice(&z);
        let h_x_cond = self.entropy(&all) - h_z;
        sum_h_cond - h_x_cond
    }

    /// Informativeness TC(x; z) = TC(x) - TC(x|z).
    pub fn informativeness(&self) -> f64 {
        self.total_correlation(Side::X) - self.conditional_tc()
    }

    /// (TC(x;z), TC(z), objective = TC(x;z) - TC(z)).
    pub fn corex_objective(&self) -> (f64, f64, f64) {
        let tc_xz = self.informativeness();
        let tc_z = self.total_correlation(Side::Z);
        (tc_xz, tc_z, tc_xz - tc_z)
    }

    /// Residual of the decomposition
    /// TC(x;z) = sum_i I(x_i; z) - I(x; z); must vanish on any joint.
    pub fn mi_decomposition_residual(&self) -> f64 {
        let z = self.z_vars();
        let sum_mi: f64 = self
            .x_vars()
            .iter()
            .map(|&xi| self.mutual_information(&[xi], &z))
            .sum();
        let mi_xz = self.mutual_information(&self.x_vars(), &z);
        (self.informativeness() - (sum_mi - mi_xz)).abs()
    }
}

/// A fully tabular encoder model over binary-or-small x: the data marginal
/// p(x) plus factorized per-latent encoders p(z_i|x). Everything the
/// variational machinery estimates by sampling is exactly summable here,
/// which makes this the oracle for the bound:
///
/// objective (decomposed form)  = sum_i I(x_i;z) - sum_i I(z_i;x)
/// variational bound            = sum_i H(x_i) + sum_i <ln q(x_i|z)>
///                                - sum_i <KL(p(z_i|x) || r(z_i))>
///
/// The bound can never exceed the objective, and matches it exactly when
/// the decoder is the true posterior and r the true marginal.
#[derive(Clone, Debug)]
pub struct TabularCorex {
    joint: DiscreteJoint,
    p_x: Vec<f64>,
    encoders: Vec<Vec<Vec<f64>>>,
}

impl TabularCorex {
    pub fn new(x_card: Vec<usize>, p_x: Vec<f64>, encoders: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let joint = DiscreteJoint::from_encoder(x_card, &p_x, &encoders)?;
        Ok(TabularCorex { joint, p_x, encoders })
    }

    /// Random model: random p(x) and random row-stochastic encoders.
    pub fn random(x_card: Vec<usize>, z_card: Vec<usize>, rng: &mut Rng) -> Result<Self> {
        let x_states: usize = x_card.iter().product();
        let mut p_x: Vec<f64> = (0..x_states).map(|_| (2.0 * rng.uniform() - 1.0).exp()).collect();
        let s: f64 = p_x.iter().sum();
        for p in &mut p_x {
            *p /= s;
        }
        let mut encoders = Vec::with_capacity(z_card.len());
        for &k in &z_card {
            let mut enc = Vec::with_capacity(x_states);
            for _ in 0..x_states {
                let mut row: Vec<f64> =
                    (0..k).map(|_| (2.0 * rng.uniform() - 1.0).exp()).collect();
                let s: f64 = row.iter().sum();
                for p in &mut row {
                    *p /= s;
                }
                enc.push(row);
            }
            encoders.push(enc);
        }
        TabularCorex::new(x_card, p_x, encoders)
    }

    pub fn joint(&self) -> &DiscreteJoint {
        &self.joint
    }

    /// Exact decomposed objective sum_i I(x_i;z) - sum_i I(z_i;x).
    pub fn exact_objective(&self) -> f64 {
        let j = &self.joint;
        let z_all = j.z_vars();
        let sum_i_xi: f64 = j
            .x_vars()
            .iter()
            .map(|&xi| j.mutual_information(&[xi], &z_all))
            .sum();
        let sum_i_zi: f64 = z_all
            .iter()
            .map(|&zi| j.mutual_information(&j.x_vars(), &[zi]))
            .sum();
        sum_i_xi - sum_i_zi
    }

    /// The true per-dimension posterior decoder q(x_i|z) = p(x_i|z),
    /// indexed `[i][z_state][x_i]`.
    pub fn posterior_decoder(&self) -> Vec<Vec<Vec<f64>>> {
        let j = &self.joint;
        let z_states = j.z_states();
        let mut out = Vec::with_capacity(j.x_count());
        let z_all = j.z_vars();
        let p_z = j.marginal(&z_all);
        for xi in 0..j.x_count() {
            let card = j.x_card[xi];
            let mut vars = vec![xi];
            vars.extend_from_slice(&z_all);
            let joint_xi_z = j.marginal(&vars); // [x_i][z_state]
            let mut dec = vec![vec![0.0; card]; z_states];
            for zs in 0..z_states {
                for v in 0..card {
                    let p = joint_xi_z[v * z_states + zs];
                    dec[zs][v] = if p_z[zs] > 0.0 { p / p_z[zs] } else { 1.0 / card as f64 };
                }
            }
            out.push(dec);
        }
        out
    }

    /// The true marginal priors r(z_i) = p(z_i), indexed `[i][z_i]`.
    pub fn marginal_prior(&self) -> Vec<Vec<f64>> {
        let j = &self.joint;
        j.z_vars().iter().map(|&zv| j.marginal(&[zv])).collect()
    }

    /// Uniform decoder / prior tables for negative controls.
    pub fn uniform_decoder(&self) -> Vec<Vec<Vec<f64>>> {
        let j = &self.joint;
        (0..j.x_count())
            .map(|xi| vec![vec![1.0 / j.x_card[xi] as f64; j.x_card[xi]]; j.z_states()])
            .collect()
    }

    /// Exact evaluation of the variational bound for given decoder tables
    /// q(x_i|z) (`[i][z_state][x_i]`) and priors r(z_i) (`[i][z_i]`).
    pub fn variational_bound(&self, decoder: &[Vec<Vec<f64>>], prior: &[Vec<f64>]) -> f64 {
        let j = &self.joint;
        let z_states = j.z_states();

        // sum_i H(x_i)
        let entropy_term: f64 = j.x_vars().iter().map(|&v| j.entropy(&[v])).sum();

        // sum_i <ln q(x_i|z)> under the joint
        let mut recon = 0.0;
        let z_all = j.z_vars();
        for xi in 0..j.x_count() {
            let mut vars = vec![xi];
            vars.extend_from_slice(&z_all);
            let joint_xi_z = j.marginal(&vars); // [x_i][z_state]
            for v in 0..j.x_card[xi] {
                for zs in 0..z_states {
                    let p = joint_xi_z[v * z_states + zs];
                    if p > 0.0 {
                        recon += p * decoder[xi][zs][v].ln();
                    }
                }
            }
        }

        // sum_i E_x KL(p(z_i|x) || r(z_i))
        let mut kl = 0.0;
        for (i, enc) in self.encoders.iter().enumerate() {
            for (xs, row) in enc.iter().enumerate() {
                let mut acc = 0.0;
                for (zi, &q) in row.iter().enumerate() {
                    if q > 0.0 {
                        acc += q * (q.ln() - prior[i][zi].ln());
                    }
                }
                kl += self.p_x[xs] * acc;
            }
        }

        entropy_term + recon - kl
    }
}
