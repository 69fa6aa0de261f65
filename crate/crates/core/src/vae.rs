//! Gaussian-latent compressor over occupancy grids.
//!
//! The encoder sees one `f x f` patch of BEV columns at a time (all heights,
//! one-hot over non-empty classes) and emits `mu` and `log sigma` for one
//! latent cell. The decoder maps a latent cell back to per-voxel class logits
//! for the same patch.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, Error, Result};
use crate::numerics::mlp::{Activation, Mlp, MlpGrads, ParamScope};
use crate::numerics::rng::{normal_tensor, Rng};
use crate::numerics::Tensor;
use crate::occupancy::OccupancyGrid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub grid_dims: [usize; 3],
    /// Class count including the empty class.
    pub n_classes: usize,
    /// Spatial downsample factor along x and y.
    pub factor: usize,
    pub latent_channels: usize,
    pub hidden: Vec<usize>,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            grid_dims: [32, 32, 8],
            n_classes: 2,
            factor: 4,
            latent_channels: 16,
            hidden: vec![128],
        }
    }
}

impl VaeConfig {
    pub fn latent_dims(&self) -> [usize; 3] {
        [
            self.grid_dims[0] / self.factor,
            self.grid_dims[1] / self.factor,
            self.latent_channels,
        ]
    }

    /// Voxels covered by one latent cell.
    pub fn patch_voxels(&self) -> usize {
        self.factor * self.factor * self.grid_dims[2]
    }

    pub fn encoder_in(&self) -> usize {
        self.patch_voxels() * (self.n_classes - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w, d] = self.grid_dims;
        if self.factor == 0 || h % self.factor != 0 || w % self.factor != 0 {
            return arg_err(format!("grid {:?} not divisible by factor {}", self.grid_dims, self.factor));
        }
        if d == 0 || self.latent_channels == 0 {
            return arg_err("zero-sized grid depth or latent channels");
        }
        if !(2..=256).contains(&self.n_classes) {
            return arg_err(format!("class count {} outside [2, 256]", self.n_classes));
        }
        Ok(())
    }

    /// Input-to-latent size ratio.
    pub fn compression_ratio(&self) -> Result<f64> {
        let [h, w, d] = self.grid_dims;
        compression_ratio([h, w, d, self.n_classes - 1], self.latent_dims())
    }
}

/// `(H*W*D*C) / (h*w*c)`.
pub fn compression_ratio(grid: [usize; 4], latent: [usize; 3]) -> Result<f64> {
    if grid.contains(&0) || latent.contains(&0) {
        return arg_err("compression ratio of zero-sized dims");
    }
    let input: usize = grid.iter().product();
    let code: usize = latent.iter().product();
    Ok(input as f64 / code as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VaeMode {
    #[default]
    Pretrain,
    FinetuneAligned,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeTrainConfig {
    /// KL weight.
    pub beta: f64,
    /// Lovasz weight.
    pub lambda: f64,
    /// Alignment weight, used only in aligned mode.
    pub kappa: f64,
    pub mode: VaeMode,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            beta: 1e-4,
            lambda: 1.0,
            kappa: 1.0,
            mode: VaeMode::Pretrain,
        }
    }
}

impl VaeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.beta, self.lambda, self.kappa].iter().any(|w| !(*w >= 0.0)) {
            return arg_err("loss weights must be >= 0");
        }
        Ok(())
    }
}

/// Posterior parameters and a sample for one grid, each shaped `(h, w, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub mu: Tensor,
    pub sigma: Tensor,
    pub z: Tensor,
    /// Set once `z` has been multiplied by the flow's latent scale.
    pub scaled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeModel {
    pub config: VaeConfig,
    pub encoder: Mlp,
    pub decoder: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeGrads {
    pub encoder: MlpGrads,
    pub decoder: MlpGrads,
}

impl VaeGrads {
    /// Same order as [`VaeModel::params_mut`].
    pub fn into_tensors(self) -> Vec<Tensor> {
        let mut out = self.encoder.into_tensors(ParamScope::All);
        out.extend(self.decoder.into_tensors(ParamScope::All));
        out
    }
}

impl VaeModel {
    pub fn init(config: VaeConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = config.latent_channels;
        let mut enc = vec![config.encoder_in()];
        enc.extend(&config.hidden);
        enc.push(2 * c);
        let mut dec = vec![c];
        dec.extend(config.hidden.iter().rev());
        dec.push(config.patch_voxels() * config.n_classes);
        let encoder = Mlp::init(&enc, Activation::Silu, rng)?;
        let decoder = Mlp::init(&dec, Activation::Silu, rng)?;
        Ok(Self {
            config,
            encoder,
            decoder,
        })
    }

    pub fn latent_dims(&self) -> [usize; 3] {
        self.config.latent_dims()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.encoder.params(ParamScope::All);
        p.extend(self.decoder.params(ParamScope::All));
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.params_mut(ParamScope::All);
        p.extend(self.decoder.params_mut(ParamScope::All));
        p
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut p = self.encoder.named_params(&format!("{prefix}.encoder"));
        p.extend(self.decoder.named_params(&format!("{prefix}.decoder")));
        p
    }

    pub fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut p = self.encoder.named_params_mut(&format!("{prefix}.encoder"));
        p.extend(self.decoder.named_params_mut(&format!("{prefix}.decoder")));
        p
    }

    fn check_grid(&self, g: &OccupancyGrid) -> Result<()> {
        if g.dims() != self.config.grid_dims {
            return dim_err(format!("grid dims {:?}, model expects {:?}", g.dims(), self.config.grid_dims));
        }
        if g.n_classes() as usize != self.config.n_classes {
            return dim_err(format!(
                "grid has {} classes, model expects {}",
                g.n_classes(),
                self.config.n_classes
            ));
        }
        Ok(())
    }

    /// Patch features of a batch of grids, shape `(B*h*w, encoder_in)`.
    pub fn patch_features(&self, grids: &[&OccupancyGrid]) -> Result<Tensor> {
        let cfg = &self.config;
        let [h, w, _] = cfg.latent_dims();
        let [_, gw, d] = cfg.grid_dims;
        let f = cfg.factor;
        let k = cfg.n_classes - 1;
        let fin = cfg.encoder_in();
        let mut data = vec![0.0; grids.len() * h * w * fin];
        for (b, g) in grids.iter().enumerate() {
            self.check_grid(g)?;
            let classes = g.classes();
            for (i, &c) in classes.iter().enumerate() {
                if c == 0 {
                    continue;
                }
                let (x, y, z) = (i / (gw * d), (i / d) % gw, i % d);
                let patch = (b * h + x / f) * w + y / f;
                let off = ((x % f) * f + y % f) * d + z;
                data[patch * fin + off * k + (c as usize - 1)] = 1.0;
            }
        }
        Tensor::new(vec![grids.len() * h * w, fin], data)
    }

    /// Posterior `(mu, sigma)` of one grid, each `(h, w, c)`.
    pub fn encode(&self, grid: &OccupancyGrid) -> Result<(Tensor, Tensor)> {
        let (mu, log_sigma) = self.encode_batch(&[grid])?;
        let [h, w, c] = self.latent_dims();
        Ok((
            mu.reshape(vec![h, w, c])?,
            log_sigma.map(f64::exp).reshape(vec![h, w, c])?,
        ))
    }

    /// `(mu, log sigma)` rows for a batch, each `(B*h*w, c)`.
    pub fn encode_batch(&self, grids: &[&OccupancyGrid]) -> Result<(Tensor, Tensor)> {
        let x = self.patch_features(grids)?;
        let out = self.encoder.forward(&x)?;
        Ok(split_halves(&out, self.config.latent_channels))
    }

    pub fn encode_code(&self, grid: &OccupancyGrid, rng: &mut Rng) -> Result<LatentCode> {
        let (mu, sigma) = self.encode(grid)?;
        let eps = normal_tensor(rng, mu.shape());
        let z = reparameterize(&mu, &sigma, &eps)?;
        Ok(LatentCode {
            mu,
            sigma,
            z,
            scaled: false,
        })
    }

    /// Per-voxel class probabilities, shape `(H*W*D, C)` in grid storage order.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let [h, w, c] = self.latent_dims();
        if z.len() != h * w * c {
            return dim_err(format!("latent of {} values, decoder expects {}", z.len(), h * w * c));
        }
        let rows = z.clone().reshape(vec![h * w, c])?;
        let logits = self.decoder.forward(&rows)?;
        let probs = softmax_rows(&self.patch_logits_to_voxels(&logits, 1)?);
        Ok(probs)
    }

    /// Argmax reconstruction of a latent (ties to the lowest class id).
    pub fn decode_grid(&self, z: &Tensor, like: &OccupancyGrid) -> Result<OccupancyGrid> {
        let probs = self.decode(z)?;
        let classes = argmax_rows(&probs);
        OccupancyGrid::new(like.dims(), like.resolution(), like.origin(), like.n_classes(), classes)
    }

    /// Decodes the posterior mean.
    pub fn reconstruct(&self, grid: &OccupancyGrid) -> Result<OccupancyGrid> {
        let (mu, _) = self.encode(grid)?;
        self.decode_grid(&mu, grid)
    }

    /// Maps decoder rows `(B*h*w, patch*C)` to voxel rows `(B*H*W*D, C)`.
    fn patch_logits_to_voxels(&self, logits: &Tensor, batch: usize) -> Result<Tensor> {
        let cfg = &self.config;
        let [h, w, _] = cfg.latent_dims();
        let [gh, gw, d] = cfg.grid_dims;
        let (f, nc) = (cfg.factor, cfg.n_classes);
        let pv = cfg.patch_voxels();
        let nvox = gh * gw * d;
        let mut out = vec![0.0; batch * nvox * nc];
        let src = logits.data();
        for b in 0..batch {
            for i in 0..nvox {
                let (x, y, z) = (i / (gw * d), (i / d) % gw, i % d);
                let patch = (b * h + x / f) * w + y / f;
                let off = ((x % f) * f + y % f) * d + z;
                let s = patch * pv * nc + off * nc;
                let t = (b * nvox + i) * nc;
                out[t..t + nc].copy_from_slice(&src[s..s + nc]);
            }
        }
        Tensor::new(vec![batch * nvox, nc], out)
    }

    /// Inverse of [`Self::patch_logits_to_voxels`] for gradients.
    fn voxel_grads_to_patches(&self, g: &Tensor, batch: usize) -> Result<Tensor> {
        let cfg = &self.config;
        let [h, w, _] = cfg.latent_dims();
        let [gh, gw, d] = cfg.grid_dims;
        let (f, nc) = (cfg.factor, cfg.n_classes);
        let pv = cfg.patch_voxels();
        let nvox = gh * gw * d;
        let mut out = vec![0.0; batch * h * w * pv * nc];
        let src = g.data();
        for b in 0..batch {
            for i in 0..nvox {
                let (x, y, z) = (i / (gw * d), (i / d) % gw, i % d);
                let patch = (b * h + x / f) * w + y / f;
                let off = ((x % f) * f + y % f) * d + z;
                let s = patch * pv * nc + off * nc;
                let t = (b * nvox + i) * nc;
                out[s..s + nc].copy_from_slice(&src[t..t + nc]);
            }
        }
        Tensor::new(vec![batch * h * w, pv * nc], out)
    }
}

fn split_halves(out: &Tensor, c: usize) -> (Tensor, Tensor) {
    let n = out.rows();
    let (mut a, mut b) = (Vec::with_capacity(n * c), Vec::with_capacity(n * c));
    for i in 0..n {
        let r = out.row(i);
        a.extend_from_slice(&r[..c]);
        b.extend_from_slice(&r[c..]);
    }
    (
        Tensor::new(vec![n, c], a).expect("sized"),
        Tensor::new(vec![n, c], b).expect("sized"),
    )
}

/// Row-wise softmax of a 2-D tensor.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    let cols = logits.cols();
    for row in out.data_mut().chunks_mut(cols) {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

/// Row-wise argmax, lowest index on ties.
pub fn argmax_rows(probs: &Tensor) -> Vec<u8> {
    let cols = probs.cols();
    probs
        .data()
        .chunks(cols)
        .map(|r| {
            let mut best = 0;
            for (j, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = j;
                }
            }
            best as u8
        })
        .collect()
}

/// `z = mu + sigma * eps`.
pub fn reparameterize(mu: &Tensor, sigma: &Tensor, eps: &Tensor) -> Result<Tensor> {
    mu.same_shape(sigma)?;
    mu.same_shape(eps)?;
    let mut z = mu.clone();
    for ((zi, &s), &e) in z.data_mut().iter_mut().zip(sigma.data()).zip(eps.data()) {
        *zi += s * e;
    }
    Ok(z)
}

/// KL to the standard normal: mean over cells (all but the last axis) of
/// `0.5 * sum_c (mu^2 + sigma^2 - 1 - 2 ln sigma)`.
pub fn kl_divergence(mu: &Tensor, sigma: &Tensor) -> Result<f64> {
    mu.same_shape(sigma)?;
    if let Some(s) = sigma.data().iter().find(|s| !(**s > 0.0)) {
        return arg_err(format!("sigma must be positive, got {s}"));
    }
    let cells = (mu.len() / mu.cols()).max(1);
    let total: f64 = mu
        .data()
        .iter()
        .zip(sigma.data())
        .map(|(&m, &s)| 0.5 * (m * m + s * s - 1.0 - 2.0 * s.ln()))
        .sum();
    Ok(total / cells as f64)
}

fn check_probs(probs: &Tensor, labels: &[u8]) -> Result<()> {
    if probs.ndim() != 2 || probs.rows() != labels.len() {
        return dim_err(format!("probs {:?} vs {} labels", probs.shape(), labels.len()));
    }
    let c = probs.cols();
    for (i, row) in probs.data().chunks(c).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|p| *p < -1e-12) {
            return arg_err(format!("row {i} is not a distribution (sum {s})"));
        }
    }
    if let Some(l) = labels.iter().find(|&&l| l as usize >= c) {
        return arg_err(format!("label {l} >= class count {c}"));
    }
    Ok(())
}

/// Lovasz-softmax: mean over classes present in `labels` of the Lovasz
/// extension of the Jaccard loss. `probs` is `(N, C)`.
pub fn lovasz_softmax(probs: &Tensor, labels: &[u8]) -> Result<f64> {
    Ok(lovasz_softmax_grad(probs, labels)?.0)
}

/// Loss and its gradient with respect to `probs`.
pub fn lovasz_softmax_grad(probs: &Tensor, labels: &[u8]) -> Result<(f64, Tensor)> {
    check_probs(probs, labels)?;
    let (n, nc) = (probs.rows(), probs.cols());
    let mut grad = Tensor::zeros(probs.shape());
    let mut present = 0usize;
    let mut total = 0.0;
    let mut errors = vec![0.0; n];
    let mut order: Vec<usize> = (0..n).collect();
    let p = probs.data();
    for c in 0..nc {
        let gts = labels.iter().filter(|&&l| l as usize == c).count();
        if gts == 0 {
            continue;
        }
        present += 1;
        for i in 0..n {
            let fg = if labels[i] as usize == c { 1.0 } else { 0.0 };
            errors[i] = (fg - p[i * nc + c]).abs();
        }
        for (i, o) in order.iter_mut().enumerate() {
            *o = i;
        }
        order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]).then(a.cmp(&b)));
        let (mut cum_fg, mut prev_jac) = (0usize, 0.0);
        let g = grad.data_mut();
        for (k, &i) in order.iter().enumerate() {
            let is_fg = labels[i] as usize == c;
            cum_fg += usize::from(is_fg);
            let inter = (gts - cum_fg) as f64;
            let union = (gts + (k + 1 - cum_fg)) as f64;
            let jac = 1.0 - inter / union;
            let weight = jac - prev_jac;
            prev_jac = jac;
            total += errors[i] * weight;
            // d|fg - p| / dp
            g[i * nc + c] += if is_fg { -weight } else { weight };
        }
    }
    let scale = 1.0 / present as f64;
    Ok((total * scale, grad.scale(scale)))
}

/// Mean over rows of `1 - cos(z_i, d_i)`, skipping zero-norm rows. Returns
/// the loss, its gradient with respect to `z` and the number skipped.
pub fn cosine_align_loss(z: &Tensor, d: &Tensor) -> Result<(f64, Tensor, usize)> {
    z.same_shape(d)?;
    let c = z.cols();
    let n = z.len() / c.max(1);
    let mut grad = Tensor::zeros(z.shape());
    let (mut total, mut used, mut skipped) = (0.0, 0usize, 0usize);
    for i in 0..n {
        let zi = &z.data()[i * c..(i + 1) * c];
        let di = &d.data()[i * c..(i + 1) * c];
        let (nz, nd) = (crate::numerics::tensor::dot(zi, zi).sqrt(), crate::numerics::tensor::dot(di, di).sqrt());
        if nz == 0.0 || nd == 0.0 {
            skipped += 1;
            continue;
        }
        let cos = crate::numerics::tensor::dot(zi, di) / (nz * nd);
        total += 1.0 - cos;
        used += 1;
        let g = &mut grad.data_mut()[i * c..(i + 1) * c];
        for j in 0..c {
            g[j] = -(di[j] / (nz * nd) - cos * zi[j] / (nz * nz));
        }
    }
    if skipped > 0 {
        log::warn!("cosine alignment skipped {skipped} zero-norm cells");
    }
    if used == 0 {
        return Ok((0.0, grad, skipped));
    }
    let s = 1.0 / used as f64;
    Ok((total * s, grad.scale(s), skipped))
}

#[derive(Debug, Clone)]
pub struct VaeLossOutput {
    pub total: f64,
    pub ce: f64,
    pub kl: f64,
    pub lovasz: f64,
    pub cos: f64,
    pub grads: VaeGrads,
}

/// Training loss over a batch of grids with fresh reparameterization noise.
/// `targets` holds one detached `(h, w, c)` alignment latent per grid.
pub fn vae_loss(
    model: &VaeModel,
    grids: &[&OccupancyGrid],
    targets: Option<&[Tensor]>,
    cfg: &VaeTrainConfig,
    rng: &mut Rng,
) -> Result<VaeLossOutput> {
    let [h, w, c] = model.latent_dims();
    let eps = normal_tensor(rng, &[grids.len() * h * w, c]);
    vae_loss_with_noise(model, grids, targets, cfg, &eps)
}

/// [`vae_loss`] with explicit noise of shape `(B*h*w, c)`.
pub fn vae_loss_with_noise(
    model: &VaeModel,
    grids: &[&OccupancyGrid],
    targets: Option<&[Tensor]>,
    cfg: &VaeTrainConfig,
    eps: &Tensor,
) -> Result<VaeLossOutput> {
    cfg.validate()?;
    if grids.is_empty() {
        return arg_err("empty batch");
    }
    let aligned = cfg.mode == VaeMode::FinetuneAligned;
    if aligned && targets.is_none() {
        return arg_err("aligned mode needs target latents");
    }
    let batch = grids.len();
    let [h, w, c] = model.latent_dims();
    let cells = batch * h * w;
    if eps.len() != cells * c {
        return dim_err(format!("noise of {} values, need {}", eps.len(), cells * c));
    }

    let x = model.patch_features(grids)?;
    let (enc_out, enc_cache) = model.encoder.forward_cached(&x)?;
    let (mu, log_sigma) = split_halves(&enc_out, c);
    let sigma = log_sigma.map(f64::exp);
    let z = reparameterize(&mu, &sigma, &eps.clone().reshape(vec![cells, c])?)?;
    let (logits_p, dec_cache) = model.decoder.forward_cached(&z)?;
    let logits = model.patch_logits_to_voxels(&logits_p, batch)?;
    let probs = softmax_rows(&logits);
    let labels: Vec<u8> = grids.iter().flat_map(|g| g.classes().iter().copied()).collect();
    let nvox = labels.len() as f64;
    let nc = model.config.n_classes;

    // cross-entropy, d/dlogits = (p - onehot) / N
    let mut ce = 0.0;
    let mut dlogits = probs.clone();
    for (i, &l) in labels.iter().enumerate() {
        let p = probs.data()[i * nc + l as usize];
        ce -= p.max(f64::MIN_POSITIVE).ln();
        dlogits.data_mut()[i * nc + l as usize] -= 1.0;
    }
    ce /= nvox;
    let mut dlogits = dlogits.scale(1.0 / nvox);

    let mut lovasz = 0.0;
    if cfg.lambda != 0.0 {
        let (lv, dprobs) = lovasz_softmax_grad(&probs, &labels)?;
        lovasz = lv;
        // softmax backward: p_j (g_j - sum_k p_k g_k)
        let (p, g, out) = (probs.data(), dprobs.data(), dlogits.data_mut());
        for i in 0..labels.len() {
            let r = i * nc..(i + 1) * nc;
            let inner: f64 = p[r.clone()].iter().zip(&g[r.clone()]).map(|(a, b)| a * b).sum();
            for j in r {
                out[j] += cfg.lambda * p[j] * (g[j] - inner);
            }
        }
    }

    let dlogits_p = model.voxel_grads_to_patches(&dlogits, batch)?;
    let (dec_grads, dz) = model.decoder.backward(&dec_cache, &dlogits_p)?;

    // per-cell KL averaged over cells in the batch
    let kl = kl_divergence(&mu, &sigma)?;
    let mut dmu = dz.clone();
    let mut dls = Tensor::zeros(&[cells, c]);
    {
        let inv = cfg.beta / cells as f64;
        let (m, s, e) = (mu.data(), sigma.data(), eps.data());
        let (gm, gs, gz) = (dmu.data_mut(), dls.data_mut(), dz.data());
        for i in 0..cells * c {
            gs[i] = gz[i] * e[i] * s[i] + inv * (s[i] * s[i] - 1.0);
            gm[i] += inv * m[i];
        }
    }

    let mut cos = 0.0;
    if aligned && cfg.kappa != 0.0 {
        let t = targets.expect("checked above");
        if t.len() != batch {
            return dim_err(format!("{} targets for {} grids", t.len(), batch));
        }
        let mut flat = Vec::with_capacity(cells * c);
        for ti in t {
            if ti.len() != h * w * c {
                return dim_err(format!("target latent of {} values, need {}", ti.len(), h * w * c));
            }
            flat.extend_from_slice(ti.data());
        }
        let d = Tensor::new(vec![cells, c], flat)?;
        let (lc, gc, _) = cosine_align_loss(&mu, &d)?;
        cos = lc;
        dmu.add_scaled(&gc, cfg.kappa)?;
    }

    let mut upstream = Vec::with_capacity(cells * 2 * c);
    for i in 0..cells {
        upstream.extend_from_slice(dmu.row(i));
        upstream.extend_from_slice(dls.row(i));
    }
    let upstream = Tensor::new(vec![cells, 2 * c], upstream)?;
    let (enc_grads, _) = model.encoder.backward(&enc_cache, &upstream)?;

    let mut total = ce + cfg.beta * kl + cfg.lambda * lovasz;
    if aligned && cfg.kappa != 0.0 {
        total += cfg.kappa * cos;
    }
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("vae loss {total}")));
    }
    Ok(VaeLossOutput {
        total,
        ce,
        kl,
        lovasz,
        cos,
        grads: VaeGrads {
            encoder: enc_grads,
            decoder: dec_grads,
        },
    })
}

/// Mean reconstruction IoU of posterior-mean decodes.
pub fn reconstruction_iou(model: &VaeModel, grids: &[&OccupancyGrid]) -> Result<f64> {
    if grids.is_empty() {
        return arg_err("no grids to score");
    }
    let mut s = 0.0;
    for g in grids {
        s += crate::occupancy::iou(&model.reconstruct(g)?, g)?;
    }
    Ok(s / grids.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{finite_diff_grad, max_relative_error};
    use crate::numerics::rng::{below, normal, seeded, uniform};
    use crate::occupancy::synth::{synth_scene_with, Domain, SceneConfig};

    fn small_config(n_classes: usize) -> VaeConfig {
        VaeConfig {
            grid_dims: [8, 8, 2],
            n_classes,
            factor: 4,
            latent_channels: 3,
            hidden: vec![6],
        }
    }

    fn random_grid(cfg: &VaeConfig, rng: &mut Rng) -> OccupancyGrid {
        let n = cfg.grid_dims.iter().product();
        let classes = (0..n).map(|_| below(rng, cfg.n_classes) as u8).collect();
        OccupancyGrid::new(cfg.grid_dims, 0.5, [0.0; 3], cfg.n_classes as u32, classes).unwrap()
    }

    #[test]
    fn zero_encoder_gives_bias() {
        let cfg = small_config(2);
        let mut m = VaeModel::init(cfg.clone(), &mut seeded(0)).unwrap();
        let last = m.encoder.layers.len() - 1;
        for (i, l) in m.encoder.layers.iter_mut().enumerate() {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
            if i == last {
                l.bias = Tensor::from_vec(vec![0.1, 0.2, 0.3, -1.0, 0.0, 0.5]);
            }
        }
        let g = random_grid(&cfg, &mut seeded(1));
        let (mu, sigma) = m.encode(&g).unwrap();
        assert_eq!(mu.shape(), &[2, 2, 3]);
        for i in 0..4 {
            assert_eq!(&mu.data()[i * 3..i * 3 + 3], &[0.1, 0.2, 0.3]);
            assert_eq!(&sigma.data()[i * 3..i * 3 + 3], &[(-1.0f64).exp(), 1.0, 0.5f64.exp()]);
        }
        assert_eq!(m.encode(&g).unwrap(), m.encode(&g).unwrap());
    }

    #[test]
    fn latent_shape_follows_factor() {
        let cfg = VaeConfig {
            grid_dims: [32, 16, 4],
            factor: 8,
            latent_channels: 5,
            ..VaeConfig::default()
        };
        let m = VaeModel::init(cfg.clone(), &mut seeded(0)).unwrap();
        let g = OccupancyGrid::empty([32, 16, 4], 0.5, [0.0; 3], 2).unwrap();
        assert_eq!(m.encode(&g).unwrap().0.shape(), &[4, 2, 5]);
        let bad = OccupancyGrid::empty([16, 16, 4], 0.5, [0.0; 3], 2).unwrap();
        assert!(m.encode(&bad).is_err());
    }

    #[test]
    fn reparameterize_examples() {
        let mu = Tensor::from_vec(vec![1.0, -2.0]);
        let zero = Tensor::zeros(&[2]);
        let eps = Tensor::from_vec(vec![0.7, 0.3]);
        assert_eq!(reparameterize(&mu, &Tensor::full(&[2], 3.0), &zero).unwrap(), mu);
        assert_eq!(reparameterize(&mu, &zero, &eps).unwrap(), mu);
        let z = reparameterize(
            &Tensor::from_vec(vec![1.0]),
            &Tensor::from_vec(vec![2.0]),
            &Tensor::from_vec(vec![0.5]),
        )
        .unwrap();
        assert_eq!(z.data(), &[2.0]);
        assert!(reparameterize(&mu, &Tensor::zeros(&[3]), &eps).is_err());
    }

    #[test]
    fn decode_rows_are_distributions() {
        let cfg = small_config(4);
        let m = VaeModel::init(cfg.clone(), &mut seeded(2)).unwrap();
        let z = normal_tensor(&mut seeded(3), &[2, 2, 3]);
        let p = m.decode(&z).unwrap();
        assert_eq!(p.shape(), &[8 * 8 * 2, 4]);
        for row in p.data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_rows(&Tensor::from_rows(&[vec![0.0; 4], vec![50.0, 0.0, 0.0, 0.0]]).unwrap());
        assert!(p.row(0).iter().all(|v| (v - 0.25).abs() < 1e-15));
        assert!(p.row(1)[0] >= 1.0 - 1e-20);
        assert_eq!(argmax_rows(&Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap()), vec![0]);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&Tensor::zeros(&[4, 2]), &Tensor::full(&[4, 2], 1.0)).unwrap(), 0.0);
        let kl = kl_divergence(&Tensor::from_rows(&[vec![1.0]]).unwrap(), &Tensor::from_rows(&[vec![1.0]]).unwrap()).unwrap();
        assert_eq!(kl, 0.5);
        assert!(kl_divergence(&Tensor::zeros(&[1, 1]), &Tensor::zeros(&[1, 1])).is_err());
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mut rng = seeded(11);
        let mu = [0.3, -0.8, 1.1];
        let sig = [0.6, 1.4, 0.9];
        let analytic = kl_divergence(
            &Tensor::from_rows(&[mu.to_vec()]).unwrap(),
            &Tensor::from_rows(&[sig.to_vec()]).unwrap(),
        )
        .unwrap();
        // E_q[log q(z) - log p(z)]
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            for j in 0..3 {
                let e = normal(&mut rng);
                let z = mu[j] + sig[j] * e;
                acc += -0.5 * e * e - sig[j].ln() + 0.5 * z * z;
            }
        }
        let mc = acc / n as f64;
        assert!((mc - analytic).abs() / analytic < 0.01, "{mc} vs {analytic}");
    }

    fn onehot(labels: &[u8], nc: usize) -> Tensor {
        let rows: Vec<Vec<f64>> = labels
            .iter()
            .map(|&l| (0..nc).map(|c| if c == l as usize { 1.0 } else { 0.0 }).collect())
            .collect();
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn lovasz_zero_on_perfect() {
        let labels = [0u8, 2, 1, 1, 0, 2];
        assert_eq!(lovasz_softmax(&onehot(&labels, 3), &labels).unwrap(), 0.0);
    }

    #[test]
    fn lovasz_vertices_match_jaccard_exhaustively() {
        for gt_bits in 0u8..16 {
            let labels: Vec<u8> = (0..4).map(|i| (gt_bits >> i) & 1).collect();
            for mask in 0u8..16 {
                let pred: Vec<u8> = (0..4).map(|i| (mask >> i) & 1).collect();
                let got = lovasz_softmax(&onehot(&pred, 2), &labels).unwrap();
                let mut losses = Vec::new();
                for c in 0..2u8 {
                    if !labels.contains(&c) {
                        continue;
                    }
                    let inter = (0..4).filter(|&i| pred[i] == c && labels[i] == c).count();
                    let union = (0..4).filter(|&i| pred[i] == c || labels[i] == c).count();
                    losses.push(1.0 - inter as f64 / union as f64);
                }
                let want = losses.iter().sum::<f64>() / losses.len() as f64;
                assert!((got - want).abs() < 1e-15, "gt {gt_bits:04b} mask {mask:04b}");
            }
        }
    }

    #[test]
    fn lovasz_nonnegative_and_validated() {
        let mut rng = seeded(4);
        for _ in 0..50 {
            let logits = normal_tensor(&mut rng, &[12, 3]);
            let labels: Vec<u8> = (0..12).map(|_| below(&mut rng, 3) as u8).collect();
            assert!(lovasz_softmax(&softmax_rows(&logits), &labels).unwrap() >= 0.0);
        }
        let bad = Tensor::from_rows(&[vec![0.5, 0.6]]).unwrap();
        assert!(lovasz_softmax(&bad, &[0]).is_err());
    }

    #[test]
    fn lovasz_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let mut rng = seeded(100 + seed);
            let logits = normal_tensor(&mut rng, &[10, 3]);
            let labels: Vec<u8> = (0..10).map(|_| below(&mut rng, 3) as u8).collect();
            let p = softmax_rows(&logits);
            let (_, g) = lovasz_softmax_grad(&p, &labels).unwrap();
            // chain through softmax so perturbations stay normalized
            let mut analytic = Tensor::zeros(&[10, 3]);
            for i in 0..10 {
                let inner: f64 = (0..3).map(|j| p.get2(i, j) * g.get2(i, j)).sum();
                for j in 0..3 {
                    analytic.data_mut()[i * 3 + j] = p.get2(i, j) * (g.get2(i, j) - inner);
                }
            }
            let fd = finite_diff_grad(|l| lovasz_softmax(&softmax_rows(l), &labels).unwrap(), &logits, 1e-5).unwrap();
            assert!(max_relative_error(&analytic, &fd, 1e-8) < 1e-4);
        }
    }

    #[test]
    fn cosine_examples() {
        let d = Tensor::from_rows(&[vec![1.0, 2.0, -1.0], vec![0.5, 0.0, 3.0]]).unwrap();
        assert!(cosine_align_loss(&d, &d).unwrap().0.abs() < 1e-15);
        assert!((cosine_align_loss(&d.scale(-1.0), &d).unwrap().0 - 2.0).abs() < 1e-15);
        assert!(cosine_align_loss(&d.scale(2.0), &d).unwrap().0.abs() < 1e-15);
        let z = Tensor::from_rows(&[vec![0.0; 3], vec![1.0, 1.0, 1.0]]).unwrap();
        assert_eq!(cosine_align_loss(&z, &d).unwrap().2, 1);
    }

    #[test]
    fn cosine_gradient_and_scale_invariance() {
        for seed in 0..5 {
            let mut rng = seeded(200 + seed);
            let z = normal_tensor(&mut rng, &[6, 4]);
            let d = normal_tensor(&mut rng, &[6, 4]);
            let (l, g, _) = cosine_align_loss(&z, &d).unwrap();
            let fd = finite_diff_grad(|x| cosine_align_loss(x, &d).unwrap().0, &z, 1e-5).unwrap();
            assert!(max_relative_error(&g, &fd, 1e-8) < 1e-4);
            let mut scaled = z.clone();
            for (i, row) in scaled.data_mut().chunks_mut(4).enumerate() {
                let s = uniform(&mut rng, 0.1, 5.0) * (i + 1) as f64;
                row.iter_mut().for_each(|v| *v *= s);
            }
            assert!((cosine_align_loss(&scaled, &d).unwrap().0 - l).abs() < 1e-12);
        }
    }

    fn loss_of(m: &VaeModel, grids: &[&OccupancyGrid], t: Option<&[Tensor]>, cfg: &VaeTrainConfig, eps: &Tensor) -> f64 {
        vae_loss_with_noise(m, grids, t, cfg, eps).unwrap().total
    }

    fn check_vae_grads(cfg: VaeTrainConfig, n_classes: usize) {
        for seed in 0..5 {
            let mut rng = seeded(300 + seed);
            // few voxels keep Lovasz sort-order kinks wider than the probe step
            let vc = VaeConfig {
                grid_dims: [4, 4, 2],
                factor: 2,
                ..small_config(n_classes)
            };
            let model = VaeModel::init(vc.clone(), &mut rng).unwrap();
            let grids = [random_grid(&vc, &mut rng), random_grid(&vc, &mut rng)];
            let refs: Vec<&OccupancyGrid> = grids.iter().collect();
            let eps = normal_tensor(&mut rng, &[8, 3]);
            let targets: Vec<Tensor> = (0..2).map(|_| normal_tensor(&mut rng, &[2, 2, 3])).collect();
            let t = Some(&targets[..]);
            let out = vae_loss_with_noise(&model, &refs, t, &cfg, &eps).unwrap();
            let analytic = out.grads.into_tensors();
            let n_params = model.params().len();
            for k in 0..n_params {
                let base = model.params()[k].clone();
                let fd = finite_diff_grad(
                    |p| {
                        let mut m = model.clone();
                        *m.params_mut()[k] = p.clone();
                        loss_of(&m, &refs, t, &cfg, &eps)
                    },
                    &base,
                    1e-5,
                )
                .unwrap();
                let err = max_relative_error(&analytic[k], &fd, 1e-6);
                assert!(err < 1e-4, "param {k} seed {seed}: rel err {err}");
            }
        }
    }

    #[test]
    fn vae_gradients_pretrain() {
        check_vae_grads(VaeTrainConfig { beta: 0.3, lambda: 0.5, ..Default::default() }, 3);
    }

    #[test]
    fn vae_gradients_aligned() {
        check_vae_grads(
            VaeTrainConfig {
                beta: 0.1,
                lambda: 0.8,
                kappa: 0.7,
                mode: VaeMode::FinetuneAligned,
            },
            2,
        );
    }

    #[test]
    fn aligned_with_zero_kappa_equals_pretrain() {
        let vc = small_config(3);
        let mut rng = seeded(9);
        let model = VaeModel::init(vc.clone(), &mut rng).unwrap();
        let g = random_grid(&vc, &mut rng);
        let eps = normal_tensor(&mut rng, &[4, 3]);
        let t = vec![normal_tensor(&mut rng, &[2, 2, 3])];
        let pre = VaeTrainConfig::default();
        let ali = VaeTrainConfig {
            kappa: 0.0,
            mode: VaeMode::FinetuneAligned,
            ..pre
        };
        let a = vae_loss_with_noise(&model, &[&g], None, &pre, &eps).unwrap();
        let b = vae_loss_with_noise(&model, &[&g], Some(&t), &ali, &eps).unwrap();
        assert_eq!(a.total.to_bits(), b.total.to_bits());
        assert_eq!(a.grads, b.grads);
        let need = VaeTrainConfig { mode: VaeMode::FinetuneAligned, ..pre };
        assert!(vae_loss_with_noise(&model, &[&g], None, &need, &eps).is_err());
    }

    #[test]
    fn ce_only_perfect_decoder_gives_small_ce() {
        // decoder biases pinned to the labels with near-zero weights
        let vc = small_config(2);
        let mut model = VaeModel::init(vc.clone(), &mut seeded(5)).unwrap();
        let g = random_grid(&vc, &mut seeded(6));
        for l in &mut model.decoder.layers {
            l.weight.fill(0.0);
        }
        let last = model.decoder.layers.len() - 1;
        let pv = vc.patch_voxels();
        let mut bias = vec![0.0; pv * 2];
        // every patch shares one decoder, so use a grid whose patches agree
        let mut patch_labels = vec![0u8; pv];
        for (i, l) in patch_labels.iter_mut().enumerate() {
            *l = (i % 3 == 0) as u8;
        }
        for (o, &l) in patch_labels.iter().enumerate() {
            bias[o * 2 + l as usize] = 40.0;
        }
        model.decoder.layers[last].bias = Tensor::from_vec(bias);
        let mut tiled = g.blank_like();
        let [_, gw, d] = vc.grid_dims;
        for i in 0..tiled.len() {
            let (x, y, z) = (i / (gw * d), (i / d) % gw, i % d);
            let off = ((x % 4) * 4 + y % 4) * d + z;
            tiled.set(x, y, z, patch_labels[off]);
        }
        let cfg = VaeTrainConfig { beta: 0.0, lambda: 0.0, kappa: 0.0, mode: VaeMode::Pretrain };
        let out = vae_loss(&model, &[&tiled], None, &cfg, &mut seeded(1)).unwrap();
        assert!(out.total < 1e-15 && out.total == out.ce);
        assert_eq!(model.reconstruct(&tiled).unwrap(), tiled);
    }

    #[test]
    fn compression_examples() {
        assert_eq!(compression_ratio([16, 16, 4, 1], [4, 4, 4]).unwrap(), 16.0);
        assert_eq!(compression_ratio([4, 4, 4, 1], [4, 4, 4]).unwrap(), 1.0);
        assert_eq!(compression_ratio([200, 200, 16, 1], [25, 25, 16]).unwrap(), 64.0);
        assert!(compression_ratio([0, 1, 1, 1], [1, 1, 1]).is_err());
        let cfg = VaeConfig { latent_channels: 8, ..VaeConfig::default() };
        assert_eq!(cfg.compression_ratio().unwrap(), 16.0);
    }

    #[test]
    fn features_are_one_hot_over_occupied() {
        let cfg = SceneConfig { dims: [8, 8, 2], ..SceneConfig::default() };
        let clip = synth_scene_with(&cfg, Domain::Semantic, 3, 2).unwrap();
        let g = &clip.frames()[0];
        let vc = VaeConfig {
            grid_dims: [8, 8, 2],
            n_classes: g.n_classes() as usize,
            factor: 2,
            latent_channels: 2,
            hidden: vec![4],
        };
        let m = VaeModel::init(vc, &mut seeded(0)).unwrap();
        let x = m.patch_features(&[g]).unwrap();
        assert_eq!(x.sum() as usize, g.occupied_count());
    }
}
