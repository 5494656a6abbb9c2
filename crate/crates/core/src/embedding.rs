//! Autoencoder embedding of state columns into a low-dimensional latent space.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{mean, r_squared, std_dev};
use crate::table::{ColumnKind, DataTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Linear,
}

impl Activation {
    fn apply(self, m: &mut DMatrix<f64>) {
        if self == Activation::Tanh {
            m.apply(|v| *v = v.tanh());
        }
    }

    /// Derivative expressed through the activated value.
    fn derivative_from_output(self, out: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Activation::Tanh => out.map(|v| 1.0 - v * v),
            Activation::Linear => DMatrix::from_element(out.nrows(), out.ncols(), 1.0),
        }
    }
}

/// Full-batch optimizer. Every variant keeps the training loss
/// non-increasing except `Fixed`, which follows the raw gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// Constant step size.
    Fixed,
    /// Grow the step by 5% after an improving epoch; after a worsening one,
    /// reject the update and halve the step.
    Adaptive,
    /// Limited-memory BFGS with backtracking (Armijo) line search; one
    /// epoch is one accepted iteration.
    #[default]
    Lbfgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub step_size: f64,
    pub step_rule: StepRule,
    pub activation: Activation,
    /// Hidden width is `hidden_factor · latent_dim`.
    pub hidden_factor: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 5000,
            step_size: 1e-2,
            step_rule: StepRule::default(),
            activation: Activation::Tanh,
            hidden_factor: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// fan_in × fan_out.
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Layer {
    fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Layer {
            weights: DMatrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-bound..=bound)),
            bias: DVector::from_fn(fan_out, |_, _| rng.random_range(-bound..=bound)),
        }
    }

    fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x * &self.weights;
        for mut row in out.row_iter_mut() {
            row += self.bias.transpose();
        }
        out
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub input_cols: Vec<String>,
    pub latent_dim: usize,
    pub activation: Activation,
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    /// Encoder hidden, encoder output, decoder hidden, decoder output.
    pub layers: [Layer; 4],
    pub final_loss: f64,
    pub epochs_run: usize,
    /// Mean squared reconstruction error (normalized units) after each epoch.
    #[serde(skip)]
    pub loss_history: Vec<f64>,
}

struct Forward {
    h1: DMatrix<f64>,
    z: DMatrix<f64>,
    h2: DMatrix<f64>,
    out: DMatrix<f64>,
}

impl Embedding {
    fn forward(&self, x: &DMatrix<f64>) -> Forward {
        let mut h1 = self.layers[0].forward(x);
        self.activation.apply(&mut h1);
        let z = self.layers[1].forward(&h1);
        let mut h2 = self.layers[2].forward(&z);
        self.activation.apply(&mut h2);
        let out = self.layers[3].forward(&h2);
        Forward { h1, z, h2, out }
    }

    fn loss(&self, x: &DMatrix<f64>) -> (f64, Forward) {
        let f = self.forward(x);
        let l = (&f.out - x).norm_squared() / x.len() as f64;
        (l, f)
    }

    fn gradients(&self, x: &DMatrix<f64>, f: &Forward) -> [Layer; 4] {
        let scale = 2.0 / x.len() as f64;
        let d_out = (&f.out - x) * scale;
        let g3 = grad_layer(&f.h2, &d_out);
        let d_h2 = (&d_out * self.layers[3].weights.transpose())
            .component_mul(&self.activation.derivative_from_output(&f.h2));
        let g2 = grad_layer(&f.z, &d_h2);
        let d_z = &d_h2 * self.layers[2].weights.transpose();
        let g1 = grad_layer(&f.h1, &d_z);
        let d_h1 = (&d_z * self.layers[1].weights.transpose())
            .component_mul(&self.activation.derivative_from_output(&f.h1));
        let g0 = grad_layer(x, &d_h1);
        [g0, g1, g2, g3]
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    fn normalize(&self, table: &DataTable) -> Result<DMatrix<f64>> {
        let mut x = table.matrix_of(&self.input_cols)?;
        for (j, (m, s)) in self.means.iter().zip(&self.scales).enumerate() {
            x.column_mut(j).apply(|v| *v = (*v - m) / s);
        }
        Ok(x)
    }

    /// Latent coordinates, n × d.
    pub fn encode_matrix(&self, table: &DataTable) -> Result<DMatrix<f64>> {
        let x = self.normalize(table)?;
        let mut h1 = self.layers[0].forward(&x);
        self.activation.apply(&mut h1);
        Ok(self.layers[1].forward(&h1))
    }

    /// Reconstruction in original units, n × input width.
    pub fn decode_matrix(&self, latent: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if latent.ncols() != self.latent_dim {
            return Err(Error::Schema(format!(
                "latent matrix has {} columns, embedding has {}",
                latent.ncols(),
                self.latent_dim
            )));
        }
        let mut h2 = self.layers[2].forward(latent);
        self.activation.apply(&mut h2);
        let mut out = self.layers[3].forward(&h2);
        for (j, (m, s)) in self.means.iter().zip(&self.scales).enumerate() {
            out.column_mut(j).apply(|v| *v = *v * s + m);
        }
        Ok(out)
    }

    /// Per-input-column R² of the round trip on `table`.
    pub fn reconstruction_r2(&self, table: &DataTable) -> Result<Vec<f64>> {
        let rec = self.decode_matrix(&self.encode_matrix(table)?)?;
        self.input_cols
            .iter()
            .enumerate()
            .map(|(j, name)| {
                let truth = table.column(name)?;
                let pred: Vec<f64> = rec.column(j).iter().copied().collect();
                Ok(if std_dev(truth) == 0.0 { 1.0 } else { r_squared(truth, &pred) })
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let e: Embedding = serde_json::from_str(text)?;
        if e.scales.iter().any(|s| !(*s > 0.0)) || e.means.len() != e.input_cols.len() {
            return Err(Error::Schema("invalid embedding normalization".into()));
        }
        Ok(e)
    }
}

fn grad_layer(input: &DMatrix<f64>, d_out: &DMatrix<f64>) -> Layer {
    Layer {
        weights: input.transpose() * d_out,
        bias: d_out.row_sum().transpose(),
    }
}

fn step(layers: &[Layer; 4], grads: &[Layer; 4], lr: f64) -> [Layer; 4] {
    std::array::from_fn(|i| Layer {
        weights: &layers[i].weights - &grads[i].weights * lr,
        bias: &layers[i].bias - &grads[i].bias * lr,
    })
}

pub fn latent_names(d: usize) -> Vec<String> {
    (1..=d).map(|i| format!("L{i}")).collect()
}

/// Train an autoencoder on the state columns of `reference`.
pub fn train(reference: &DataTable, latent_dim: usize, options: &TrainOptions) -> Result<Embedding> {
    train_columns(reference, &reference.names_of(ColumnKind::State), latent_dim, options)
}

pub fn train_columns(
    reference: &DataTable,
    input_cols: &[String],
    latent_dim: usize,
    options: &TrainOptions,
) -> Result<Embedding> {
    if latent_dim == 0 {
        return Err(Error::Config("latent_dim must be >= 1".into()));
    }
    if input_cols.is_empty() {
        return Err(Error::Config("no columns to embed".into()));
    }
    if reference.nrows() < 10 * latent_dim {
        return Err(Error::Config(format!(
            "{} rows is too few for a {latent_dim}-dimensional embedding",
            reference.nrows()
        )));
    }
    if !(options.step_size > 0.0) || options.hidden_factor == 0 {
        return Err(Error::Config("step_size and hidden_factor must be positive".into()));
    }
    let width = input_cols.len();
    let mut means = Vec::with_capacity(width);
    let mut scales = Vec::with_capacity(width);
    for c in input_cols {
        let col = reference.column(c)?;
        means.push(mean(col));
        let s = std_dev(col);
        scales.push(if s > 0.0 { s } else { 1.0 });
    }
    let hidden = options.hidden_factor * latent_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let layers = [
        Layer::init(width, hidden, &mut rng),
        Layer::init(hidden, latent_dim, &mut rng),
        Layer::init(latent_dim, hidden, &mut rng),
        Layer::init(hidden, width, &mut rng),
    ];
    let mut emb = Embedding {
        input_cols: input_cols.to_vec(),
        latent_dim,
        activation: options.activation,
        means,
        scales,
        layers,
        final_loss: f64::NAN,
        epochs_run: 0,
        loss_history: Vec::with_capacity(options.epochs),
    };
    let x = emb.normalize(reference)?;

    match options.step_rule {
        StepRule::Lbfgs => run_lbfgs(&mut emb, &x, options.epochs)?,
        rule => run_gradient_descent(&mut emb, &x, options.epochs, options.step_size, rule)?,
    }
    Ok(emb)
}

fn run_gradient_descent(
    emb: &mut Embedding,
    x: &DMatrix<f64>,
    epochs: usize,
    step_size: f64,
    rule: StepRule,
) -> Result<()> {
    let (mut loss, mut fwd) = emb.loss(x);
    let mut lr = step_size;
    for epoch in 1..=epochs {
        let grads = emb.gradients(x, &fwd);
        let candidate = Embedding {
            layers: step(&emb.layers, &grads, lr),
            loss_history: Vec::new(),
            ..emb.clone()
        };
        let (new_loss, new_fwd) = candidate.loss(x);
        if !new_loss.is_finite() {
            if rule == StepRule::Fixed {
                return Err(Error::TrainingDiverged { epoch });
            }
            lr *= 0.5;
        } else if rule == StepRule::Adaptive && new_loss > loss {
            lr *= 0.5;
        } else {
            emb.layers = candidate.layers;
            loss = new_loss;
            fwd = new_fwd;
            if rule == StepRule::Adaptive {
                lr *= 1.05;
            }
        }
        if lr < f64::MIN_POSITIVE {
            return Err(Error::TrainingDiverged { epoch });
        }
        emb.loss_history.push(loss);
        emb.epochs_run = epoch;
    }
    emb.final_loss = loss;
    Ok(())
}

fn flatten(layers: &[Layer; 4]) -> DVector<f64> {
    let values: Vec<f64> = layers
        .iter()
        .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
        .collect();
    DVector::from_vec(values)
}

fn unflatten(template: &[Layer; 4], flat: &DVector<f64>) -> [Layer; 4] {
    let mut offset = 0;
    std::array::from_fn(|i| {
        let (r, c) = template[i].weights.shape();
        let weights = DMatrix::from_column_slice(r, c, &flat.as_slice()[offset..offset + r * c]);
        offset += r * c;
        let b = template[i].bias.len();
        let bias = DVector::from_column_slice(&flat.as_slice()[offset..offset + b]);
        offset += b;
        Layer { weights, bias }
    })
}

fn run_lbfgs(emb: &mut Embedding, x: &DMatrix<f64>, epochs: usize) -> Result<()> {
    const MEMORY: usize = 10;
    const ARMIJO: f64 = 1e-4;
    let eval = |emb: &Embedding| {
        let (loss, fwd) = emb.loss(x);
        (loss, flatten(&emb.gradients(x, &fwd)))
    };
    let (mut loss, mut grad) = eval(emb);
    if !loss.is_finite() {
        return Err(Error::TrainingDiverged { epoch: 0 });
    }
    let mut params = flatten(&emb.layers);
    let mut history: std::collections::VecDeque<(DVector<f64>, DVector<f64>, f64)> =
        std::collections::VecDeque::with_capacity(MEMORY);
    for epoch in 1..=epochs {
        // Two-loop recursion for the search direction.
        let mut q = grad.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * s.dot(&q);
            q.axpy(-a, y, 1.0);
            alphas.push(a);
        }
        if let Some((s, y, _)) = history.back() {
            q *= s.dot(y) / y.dot(y);
        } else {
            q *= 1.0 / grad.norm().max(1.0);
        }
        for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
            let b = rho * y.dot(&q);
            q.axpy(a - b, s, 1.0);
        }
        let mut direction = -q;
        let mut slope = grad.dot(&direction);
        if !(slope < 0.0) {
            history.clear();
            direction = -grad.clone();
            slope = -grad.norm_squared();
        }
        if slope == 0.0 {
            emb.loss_history.push(loss);
            emb.epochs_run = epoch;
            break;
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial = &params + &direction * t;
            let candidate = Embedding {
                layers: unflatten(&emb.layers, &trial),
                loss_history: Vec::new(),
                ..emb.clone()
            };
            let (l, g) = eval(&candidate);
            if l.is_finite() && l <= loss + ARMIJO * t * slope {
                accepted = Some((trial, l, g));
                break;
            }
            t *= 0.5;
        }
        let Some((trial, new_loss, new_grad)) = accepted else {
            // No decrease along the direction: converged to working precision.
            emb.loss_history.push(loss);
            emb.epochs_run = epoch;
            break;
        };
        let s = &trial - &params;
        let y = &new_grad - &grad;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if history.len() == MEMORY {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        params = trial;
        loss = new_loss;
        grad = new_grad;
        emb.loss_history.push(loss);
        emb.epochs_run = epoch;
    }
    emb.layers = unflatten(&emb.layers, &params);
    emb.final_loss = loss;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct DimSelection {
    pub embedding: Embedding,
    pub latent_dim: usize,
    /// Worst per-variable R² of the chosen embedding.
    pub worst_r2: f64,
    /// Set when no dimension up to the maximum met the threshold.
    pub threshold_missed: bool,
}

/// Smallest latent dimension whose worst per-variable reconstruction R²
/// reaches `r2_threshold`.
pub fn select_dim(
    reference: &DataTable,
    max_dim: usize,
    r2_threshold: f64,
    options: &TrainOptions,
) -> Result<DimSelection> {
    let width = reference.names_of(ColumnKind::State).len();
    if max_dim == 0 || max_dim > width {
        return Err(Error::Config(format!("max_dim must lie in 1..={width}")));
    }
    let mut last = None;
    for d in 1..=max_dim {
        let emb = train(reference, d, options)?;
        let worst = emb
            .reconstruction_r2(reference)?
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        log::info!("latent dim {d}: worst reconstruction R2 {worst:.5}");
        if worst >= r2_threshold {
            return Ok(DimSelection { embedding: emb, latent_dim: d, worst_r2: worst, threshold_missed: false });
        }
        last = Some((emb, worst));
    }
    let (embedding, worst_r2) = last.expect("max_dim >= 1");
    log::warn!("no latent dimension up to {max_dim} reached R2 {r2_threshold}");
    Ok(DimSelection { embedding, latent_dim: max_dim, worst_r2, threshold_missed: true })
}

/// Replace the embedded columns by latent columns L1..Ld; all other columns
/// are carried over unchanged.
pub fn encode_table(embedding: &Embedding, table: &DataTable) -> Result<DataTable> {
    let latent = embedding.encode_matrix(table)?;
    let mut columns: Vec<(String, Vec<f64>)> = latent_names(embedding.latent_dim)
        .into_iter()
        .enumerate()
        .map(|(j, n)| (n, latent.column(j).iter().copied().collect()))
        .collect();
    let mut kinds = vec![ColumnKind::State; columns.len()];
    for (j, name) in table.names().iter().enumerate() {
        if embedding.input_cols.contains(name) || table.kinds()[j] == ColumnKind::State {
            continue;
        }
        columns.push((name.clone(), table.column_at(j).to_vec()));
        kinds.push(table.kinds()[j]);
    }
    DataTable::from_columns_with_kinds(table.steps().to_vec(), columns, kinds)
}

/// Map latent columns back to the embedded columns, carrying other
/// non-latent columns over unchanged.
pub fn decode_table(embedding: &Embedding, latent_table: &DataTable) -> Result<DataTable> {
    let names = latent_names(embedding.latent_dim);
    let latent = latent_table.matrix_of(&names)?;
    let rec = embedding.decode_matrix(&latent)?;
    let mut columns: Vec<(String, Vec<f64>)> = embedding
        .input_cols
        .iter()
        .enumerate()
        .map(|(j, n)| (n.clone(), rec.column(j).iter().copied().collect()))
        .collect();
    let mut kinds = vec![ColumnKind::State; columns.len()];
    for (j, name) in latent_table.names().iter().enumerate() {
        if names.contains(name) {
            continue;
        }
        columns.push((name.clone(), latent_table.column_at(j).to_vec()));
        kinds.push(latent_table.kinds()[j]);
    }
    DataTable::from_columns_with_kinds(latent_table.steps().to_vec(), columns, kinds)
}
