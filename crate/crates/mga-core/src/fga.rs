//! Fine-Granular Aggregator: soft-assigns grid features to learnable
//! cluster centers and aggregates l2-normalized residual tokens, one token
//! per cluster, per layer.
//!
//! The soft assignment is a softmax over clusters of the center logits
//! `x_i·c_j + b_j`, so every grid cell gets a distribution over the M
//! clusters. Each token is `Norm(Σ_i γ_ij (x_i − c*_j))` with a learnable
//! residual anchor `c*_j` per cluster.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::data::types::GridFeatures;
use crate::error::{MgaError, Result};
use crate::numerics::matrix::{norm2, Matrix, Real};
use crate::numerics::ops::{softmax_unchecked, NORM_EPS};

/// Learnable state of one layer's aggregator.
#[derive(Clone, Debug, PartialEq)]
pub struct FgaParams<T> {
    /// Cluster centers, M × D.
    pub centers: Matrix<T>,
    /// Assignment biases, 1 × M.
    pub biases: Matrix<T>,
    /// Residual anchors, M × D (same shape as the centers).
    pub anchors: Matrix<T>,
}

impl<T: Real> FgaParams<T> {
    /// Centers from a zero-mean Gaussian with sigma 1/√D, biases zero,
    /// anchors starting equal to the centers so residuals begin centered.
    pub fn init<R: Rng>(num_clusters: usize, dim: usize, rng: &mut R) -> Self {
        assert!(num_clusters >= 1, "need at least one cluster");
        let sigma = 1.0 / (dim as f64).sqrt();
        let centers = Matrix::gaussian(num_clusters, dim, sigma, rng);
        Self {
            anchors: centers.clone(),
            biases: Matrix::zeros(1, num_clusters),
            centers,
        }
    }

    pub fn num_clusters(&self) -> usize {
        self.centers.rows()
    }

    pub fn dim(&self) -> usize {
        self.centers.cols()
    }

    fn check_grid(&self, grid: &GridFeatures<T>) -> Result<()> {
        if grid.dim() != self.dim() {
            return Err(MgaError::DimMismatch {
                context: "fga".into(),
                expected: format!("grid dim {}", self.dim()),
                got: format!("{}", grid.dim()),
            });
        }
        Ok(())
    }
}

/// Soft cluster assignments γ, n × M; every row on the simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentMatrix<T>(pub Matrix<T>);

/// M l2-normalized tokens, one row per cluster.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSet<T> {
    pub tokens: Matrix<T>,
}

impl<T: Real> TokenSet<T> {
    pub fn num_tokens(&self) -> usize {
        self.tokens.rows()
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }
}

pub fn assign_soft<T: Real>(
    grid: &GridFeatures<T>,
    params: &FgaParams<T>,
) -> Result<AssignmentMatrix<T>> {
    params.check_grid(grid)?;
    let logits = grid.values.matmul(&params.centers.transpose());
    let rows: Vec<Vec<T>> = (0..logits.rows())
        .map(|i| {
            let with_bias: Vec<T> = logits
                .row(i)
                .iter()
                .zip(params.biases.row(0))
                .map(|(&l, &b)| l + b)
                .collect();
            softmax_unchecked(&with_bias, T::one())
        })
        .collect();
    Ok(AssignmentMatrix(Matrix::from_rows(&rows)))
}

pub fn aggregate<T: Real>(
    grid: &GridFeatures<T>,
    gamma: &AssignmentMatrix<T>,
    params: &FgaParams<T>,
) -> Result<TokenSet<T>> {
    params.check_grid(grid)?;
    let gt = gamma.0.transpose(); // M × n
    let weighted = gt.matmul(&grid.values); // M × D
    let mut rows = Vec::with_capacity(params.num_clusters());
    for j in 0..params.num_clusters() {
        let mass = gt.row(j).iter().fold(T::zero(), |a, &g| a + g);
        let pre: Vec<T> = weighted
            .row(j)
            .iter()
            .zip(params.anchors.row(j))
            .map(|(&w, &a)| w - mass * a)
            .collect();
        let n = norm2(&pre);
        if n.as_f64() <= NORM_EPS {
            return Err(MgaError::DegenerateToken { cluster: j });
        }
        rows.push(pre.into_iter().map(|v| v / n).collect());
    }
    Ok(TokenSet {
        tokens: Matrix::from_rows(&rows),
    })
}

pub fn fga_forward<T: Real>(
    grid: &GridFeatures<T>,
    params: &FgaParams<T>,
) -> Result<(TokenSet<T>, AssignmentMatrix<T>)> {
    let gamma = assign_soft(grid, params)?;
    let tokens = aggregate(grid, &gamma, params)?;
    Ok((tokens, gamma))
}

/// Tape handles for one layer's aggregator parameters.
#[derive(Clone, Copy, Debug)]
pub struct FgaVars {
    pub centers: Var,
    pub biases: Var,
    pub anchors: Var,
}

pub fn bind_fga_params<T: Real>(tape: &mut Tape<T>, params: &FgaParams<T>) -> FgaVars {
    FgaVars {
        centers: tape.input(params.centers.clone()),
        biases: tape.input(params.biases.clone()),
        anchors: tape.input(params.anchors.clone()),
    }
}

/// Records the full aggregation onto the tape. Returns (tokens, γ).
pub fn fga_forward_tape<T: Real>(
    tape: &mut Tape<T>,
    grid: Var,
    vars: &FgaVars,
) -> Result<(Var, Var)> {
    let centers_t = tape.transpose(vars.centers);
    let logits = tape.matmul(grid, centers_t);
    let biased = tape.add_row_vec(logits, vars.biases);
    let gamma = tape.row_softmax(biased, T::one());

    let gamma_t = tape.transpose(gamma);
    let weighted = tape.matmul(gamma_t, grid);
    let mass = tape.row_sum(gamma_t);
    let anchor_term = tape.scale_rows(vars.anchors, mass);
    let pre = tape.sub(weighted, anchor_term);
    let tokens = tape
        .l2_norm_rows(pre, "fga.aggregate")
        .map_err(|e| match e {
            MgaError::NearZeroNorm { row: Some(j), .. } => MgaError::DegenerateToken { cluster: j },
            other => other,
        })?;
    Ok((tokens, gamma))
}

/// Gradients of a scalar objective with respect to the aggregator inputs.
#[derive(Clone, Debug)]
pub struct FgaGrads<T> {
    pub grid: Matrix<T>,
    pub centers: Matrix<T>,
    pub biases: Matrix<T>,
    pub anchors: Matrix<T>,
}

/// Exact adjoints of the aggregation given the upstream gradient with
/// respect to the token matrix.
pub fn fga_backward<T: Real>(
    grid: &GridFeatures<T>,
    params: &FgaParams<T>,
    upstream: &Matrix<T>,
) -> Result<FgaGrads<T>> {
    let mut tape = Tape::new();
    let grid_var = tape.input(grid.values.clone());
    let vars = bind_fga_params(&mut tape, params);
    let (tokens, _gamma) = fga_forward_tape(&mut tape, grid_var, &vars)?;
    assert_eq!(tape.value(tokens).shape(), upstream.shape(), "upstream shape");

    // Seed the matrix-valued upstream through a scalar contraction:
    // mean(tokens ⊙ upstream) scaled back by the element count.
    let u = tape.input(upstream.clone());
    let prod = tape.mul_elem(tokens, u);
    let objective = tape.mean_all(prod);
    let grads = tape.backward(objective, T::from_f64(upstream.len() as f64));

    Ok(FgaGrads {
        grid: grads.get_or_zeros(&tape, grid_var),
        centers: grads.get_or_zeros(&tape, vars.centers),
        biases: grads.get_or_zeros(&tape, vars.biases),
        anchors: grads.get_or_zeros(&tape, vars.anchors),
    })
}
