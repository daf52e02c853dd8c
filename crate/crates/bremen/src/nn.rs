//! Minimal MLP with hand-rolled reverse- and forward-mode differentiation.
//!
//! Networks are tanh on hidden layers, identity on the output layer. All
//! parameters live in a canonical flat ordering: layer-major, weights
//! (row-major, in x out) then bias. Gradients, Adam state, and tangent
//! vectors all use this ordering so they interoperate directly.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{BremenError, Result};
use crate::linalg::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BRMN";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// in_dim x out_dim, row-major.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layers: Vec<Layer>,
}

impl MlpParams {
    /// Xavier-uniform weights in +/- sqrt(6/(fan_in+fan_out)), zero biases.
    pub fn init<R: Rng>(dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "need at least input and output dims");
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fin, fout) = (w[0], w[1]);
                let bound = (6.0 / (fin + fout) as f64).sqrt();
                let data = (0..fin * fout)
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect();
                Layer {
                    weight: Matrix::new(fin, fout, data).unwrap(),
                    bias: vec![0.0; fout],
                }
            })
            .collect();
        MlpParams { layers }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| Layer {
                weight: Matrix::zeros(w[0], w[1]),
                bias: vec![0.0; w[1]],
            })
            .collect();
        MlpParams { layers }
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        for pair in layers.windows(2) {
            if pair[0].weight.cols() != pair[1].weight.rows() {
                return Err(BremenError::shape(
                    "MlpParams::from_layers",
                    pair[0].weight.cols(),
                    pair[1].weight.rows(),
                ));
            }
        }
        Ok(MlpParams { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].weight.rows()];
        d.extend(self.layers.iter().map(|l| l.weight.cols()));
        d
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().weight.cols()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.rows() * l.weight.cols() + l.bias.len())
            .sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn from_flat(dims: &[usize], flat: &[f64]) -> Result<Self> {
        let mut net = MlpParams::zeros(dims);
        net.set_flat(flat)?;
        Ok(net)
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(BremenError::shape(
                "set_flat",
                self.param_count(),
                flat.len(),
            ));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let wlen = l.weight.rows() * l.weight.cols();
            l.weight.data_mut().copy_from_slice(&flat[off..off + wlen]);
            off += wlen;
            let blen = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + blen]);
            off += blen;
        }
        Ok(())
    }

    fn check_input(&self, input: &Matrix, context: &'static str) -> Result<()> {
        if input.cols() != self.in_dim() {
            return Err(BremenError::shape(context, self.in_dim(), input.cols()));
        }
        Ok(())
    }

    /// Batch forward pass. Rows are samples.
    pub fn forward(&self, input: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(input)?.pop().unwrap())
    }

    /// Forward pass keeping every post-activation (input excluded, output
    /// last) for the backward pass.
    pub fn forward_cached(&self, input: &Matrix) -> Result<Vec<Matrix>> {
        self.check_input(input, "mlp_forward")?;
        let n_layers = self.layers.len();
        let mut acts: Vec<Matrix> = Vec::with_capacity(n_layers);
        for (li, layer) in self.layers.iter().enumerate() {
            let prev = if li == 0 { input } else { &acts[li - 1] };
            let mut z = prev.matmul(&layer.weight);
            let cols = z.cols();
            let last = li == n_layers - 1;
            for r in 0..z.rows() {
                for c in 0..cols {
                    let mut v = z.get(r, c) + layer.bias[c];
                    if !last {
                        v = v.tanh();
                    }
                    z.set(r, c, v);
                }
            }
            acts.push(z);
        }
        Ok(acts)
    }

    /// Gradient of `<output, upstream>` w.r.t. every parameter, flat
    /// canonical order.
    pub fn backward(&self, input: &Matrix, upstream: &Matrix) -> Result<Vec<f64>> {
        let acts = self.forward_cached(input)?;
        self.backward_from_cache(input, &acts, upstream)
    }

    /// Backward pass reusing activations from [`forward_cached`].
    pub fn backward_from_cache(
        &self,
        input: &Matrix,
        acts: &[Matrix],
        upstream: &Matrix,
    ) -> Result<Vec<f64>> {
        let out = acts.last().unwrap();
        if upstream.rows() != out.rows() || upstream.cols() != out.cols() {
            return Err(BremenError::shape(
                "mlp_backward",
                format!("{}x{}", out.rows(), out.cols()),
                format!("{}x{}", upstream.rows(), upstream.cols()),
            ));
        }
        let n_layers = self.layers.len();
        let mut grads: Vec<(Matrix, Vec<f64>)> = Vec::with_capacity(n_layers);
        // dz of the identity output layer is the upstream itself
        let mut dz = upstream.clone();
        for li in (0..n_layers).rev() {
            let prev = if li == 0 { input } else { &acts[li - 1] };
            let dw = prev.transpose().matmul(&dz);
            let mut db = vec![0.0; dz.cols()];
            for r in 0..dz.rows() {
                for c in 0..dz.cols() {
                    db[c] += dz.get(r, c);
                }
            }
            grads.push((dw, db));
            if li > 0 {
                let mut da = dz.matmul(&self.layers[li].weight.transpose());
                // chain through the tanh of the previous (hidden) layer
                let a = &acts[li - 1];
                for r in 0..da.rows() {
                    for c in 0..da.cols() {
                        let t = a.get(r, c);
                        da.set(r, c, da.get(r, c) * (1.0 - t * t));
                    }
                }
                dz = da;
            }
        }
        grads.reverse();
        let mut flat = Vec::with_capacity(self.param_count());
        for (dw, db) in grads {
            flat.extend_from_slice(dw.data());
            flat.extend_from_slice(&db);
        }
        Ok(flat)
    }

    /// Forward-mode J·v: directional derivative of the (pre-activation
    /// identity) outputs along a parameter-space tangent.
    pub fn jvp(&self, input: &Matrix, tangent: &[f64]) -> Result<Matrix> {
        self.check_input(input, "jacobian_vector_product")?;
        if tangent.len() != self.param_count() {
            return Err(BremenError::shape(
                "jacobian_vector_product",
                self.param_count(),
                tangent.len(),
            ));
        }
        let n_layers = self.layers.len();
        let mut off = 0;
        let mut act = input.clone();
        let mut tact = Matrix::zeros(input.rows(), input.cols());
        for (li, layer) in self.layers.iter().enumerate() {
            let wlen = layer.weight.rows() * layer.weight.cols();
            let tw = Matrix::new(
                layer.weight.rows(),
                layer.weight.cols(),
                tangent[off..off + wlen].to_vec(),
            )?;
            off += wlen;
            let tb = &tangent[off..off + layer.bias.len()];
            off += layer.bias.len();

            let mut z = act.matmul(&layer.weight);
            let mut tz = act.matmul(&tw).add(&tact.matmul(&layer.weight));
            let last = li == n_layers - 1;
            for r in 0..z.rows() {
                for c in 0..z.cols() {
                    let zv = z.get(r, c) + layer.bias[c];
                    let tzv = tz.get(r, c) + tb[c];
                    if last {
                        z.set(r, c, zv);
                        tz.set(r, c, tzv);
                    } else {
                        let t = zv.tanh();
                        z.set(r, c, t);
                        tz.set(r, c, tzv * (1.0 - t * t));
                    }
                }
            }
            act = z;
            tact = tz;
        }
        Ok(tact)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        self.write_to(&mut f)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let dims = self.dims();
        w.write_all(&(dims.len() as u32).to_le_bytes())?;
        for d in &dims {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        for v in self.flatten() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        Self::read_from(&mut f)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| BremenError::Format("truncated checkpoint header".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(BremenError::Format("bad checkpoint magic".into()));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(BremenError::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let ndims = read_u32(r)? as usize;
        if ndims < 2 || ndims > 64 {
            return Err(BremenError::Format("bad layer count".into()));
        }
        let mut dims = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            dims.push(read_u32(r)? as usize);
        }
        let mut net = MlpParams::zeros(&dims);
        let count = net.param_count();
        let mut flat = Vec::with_capacity(count);
        let mut buf = [0u8; 8];
        for _ in 0..count {
            r.read_exact(&mut buf)
                .map_err(|_| BremenError::Format("truncated checkpoint values".into()))?;
            flat.push(f64::from_le_bytes(buf));
        }
        net.set_flat(&flat)?;
        Ok(net)
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| BremenError::Format("truncated u32".into()))?;
    Ok(u32::from_le_bytes(buf))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| BremenError::Format("truncated f64".into()))?;
    Ok(f64::from_le_bytes(buf))
}
