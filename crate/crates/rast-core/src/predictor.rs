//! Backbone predictor, residual enhancement, and the output head that
//! turns fused features into horizon predictions.
//!
//! The backbone is pluggable: the built-in MLP trains from scratch, and
//! any external network can slot in behind `ExternalBackbone` as long as
//! it honors the declared output width. The enhancement branch runs in
//! parallel to the backbone and its output is concatenated, so a frozen
//! or weak backbone still leaves a trainable path to the head.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{FwdCtx, Ffn, LayerNorm, Linear, Param, xavier_uniform};
use crate::scalar::Scalar;
use crate::tensor::{concat, Tensor};

/// Plug-in contract for externally supplied backbones. `forward` must map
/// (B, N, W_in) to (B, N, out_width); the caller verifies the shape after
/// every call. `params` feeds checkpointing and, when `trainable`, the
/// optimizer.
pub trait ExternalBackbone<S: Scalar> {
    fn out_width(&self) -> usize;
    fn trainable(&self) -> bool {
        false
    }
    fn forward(&self, h_f: &Tensor<S>, ctx: &mut FwdCtx) -> Result<Tensor<S>>;
    fn params(&self) -> Vec<Param<S>> {
        Vec::new()
    }
}

/// Two hidden layers of width mlp_ratio times the input, ReLU and dropout
/// between, then a linear map to the declared output width.
pub struct MlpBackbone<S: Scalar> {
    lin1: Linear<S>,
    lin2: Linear<S>,
    lin3: Linear<S>,
    dropout: f64,
    frozen: bool,
}

impl<S: Scalar> MlpBackbone<S> {
    pub fn new(
        name: &str,
        in_width: usize,
        out_width: usize,
        mlp_ratio: f64,
        dropout: f64,
        frozen: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let hidden = ((in_width as f64 * mlp_ratio).round() as usize).max(1);
        let trainable = !frozen;
        Ok(MlpBackbone {
            lin1: Linear::new(&format!("{name}.lin1"), in_width, hidden, true, trainable, rng)?,
            lin2: Linear::new(&format!("{name}.lin2"), hidden, hidden, true, trainable, rng)?,
            lin3: Linear::new(&format!("{name}.lin3"), hidden, out_width, true, trainable, rng)?,
            dropout,
            frozen,
        })
    }

    pub fn forward(&self, x: &Tensor<S>, ctx: &mut FwdCtx) -> Result<Tensor<S>> {
        let h = self.lin1.forward(x)?.relu();
        let h = h.dropout(self.dropout, ctx.training, ctx.rng)?;
        let h = self.lin2.forward(&h)?.relu();
        let h = h.dropout(self.dropout, ctx.training, ctx.rng)?;
        self.lin3.forward(&h)
    }

    pub fn out_width(&self) -> usize {
        self.lin3.out_dim()
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn params(&self) -> Vec<Param<S>> {
        let mut p = self.lin1.params();
        p.extend(self.lin2.params());
        p.extend(self.lin3.params());
        p
    }
}

/// The prediction backbone: either the built-in MLP or an external
/// network behind the plug-in contract.
pub enum Backbone<S: Scalar> {
    Mlp(MlpBackbone<S>),
    External(Box<dyn ExternalBackbone<S>>),
}

impl<S: Scalar> Backbone<S> {
    pub fn out_width(&self) -> usize {
        match self {
            Backbone::Mlp(m) => m.out_width(),
            Backbone::External(e) => e.out_width(),
        }
    }

    pub fn trainable(&self) -> bool {
        match self {
            Backbone::Mlp(m) => !m.frozen(),
            Backbone::External(e) => e.trainable(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Backbone::Mlp(_) => "mlp",
            Backbone::External(_) => "external",
        }
    }

    /// Runs the backbone and enforces the (B, N, out_width) contract on
    /// whatever comes back.
    pub fn forward(&self, h_f: &Tensor<S>, ctx: &mut FwdCtx) -> Result<Tensor<S>> {
        let shape = h_f.shape().to_vec();
        let out = match self {
            Backbone::Mlp(m) => m.forward(h_f, ctx)?,
            Backbone::External(e) => e.forward(h_f, ctx)?,
        };
        let expected = [shape[0], shape[1], self.out_width()];
        if out.shape() != expected {
            return Err(Error::contract(
                "backbone",
                format!(
                    "backbone returned shape {:?}, contract requires {:?}",
                    out.shape(),
                    expected
                ),
            ));
        }
        Ok(out)
    }

    pub fn params(&self) -> Vec<Param<S>> {
        match self {
            Backbone::Mlp(m) => m.params(),
            Backbone::External(e) => e.params(),
        }
    }
}

/// Residual enhancement branch: a linear map into the retrieval width, a
/// pointwise convolution across feature channels, ReLU, a second linear
/// map, and a second pointwise convolution. Runs alongside the backbone;
/// the two outputs concatenate into Z.
pub struct ResidualEnhancer<S: Scalar> {
    lin1: Linear<S>,
    conv1: Param<S>,
    conv1_bias: Param<S>,
    lin2: Linear<S>,
    conv2: Param<S>,
    conv2_bias: Param<S>,
    d_r: usize,
}

impl<S: Scalar> ResidualEnhancer<S> {
    pub fn new(name: &str, in_width: usize, d_r: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let conv = |suffix: &str, rng: &mut ChaCha8Rng| {
            Param::new(
                format!("{name}.{suffix}"),
                xavier_uniform(rng, d_r, d_r),
                &[d_r, d_r, 1, 1],
                true,
            )
        };
        Ok(ResidualEnhancer {
            lin1: Linear::new(&format!("{name}.lin1"), in_width, d_r, true, true, rng)?,
            conv1: conv("conv1", rng)?,
            conv1_bias: Param::new(format!("{name}.conv1.bias"), vec![S::zero(); d_r], &[d_r], true)?,
            lin2: Linear::new(&format!("{name}.lin2"), d_r, d_r, true, true, rng)?,
            conv2: conv("conv2", rng)?,
            conv2_bias: Param::new(format!("{name}.conv2.bias"), vec![S::zero(); d_r], &[d_r], true)?,
            d_r,
        })
    }

    pub fn out_width(&self) -> usize {
        self.d_r
    }

    /// Kernel size 1 over the node axis: features are the channels, so
    /// the map is shared by every node.
    fn conv1x1(&self, x: &Tensor<S>, kernel: &Param<S>, bias: &Param<S>) -> Result<Tensor<S>> {
        let shape = x.shape().to_vec();
        let (b, n, d) = (shape[0], shape[1], shape[2]);
        let img = x.permute(&[0, 2, 1])?.reshape(&[b, d, n, 1])?;
        let out = img.conv2d(&kernel.value(), Some(&bias.value()), (1, 1), (0, 0))?;
        out.reshape(&[b, d, n])?.permute(&[0, 2, 1])
    }

    pub fn forward(&self, h_f: &Tensor<S>) -> Result<Tensor<S>> {
        let x = self.lin1.forward(h_f)?;
        let x = self.conv1x1(&x, &self.conv1, &self.conv1_bias)?.relu();
        let x = self.lin2.forward(&x)?;
        self.conv1x1(&x, &self.conv2, &self.conv2_bias)
    }

    pub fn params(&self) -> Vec<Param<S>> {
        let mut p = self.lin1.params();
        p.push(self.conv1.clone());
        p.push(self.conv1_bias.clone());
        p.extend(self.lin2.params());
        p.push(self.conv2.clone());
        p.push(self.conv2_bias.clone());
        p
    }
}

/// Final stage: LayerNorm(Z) + FFN(Z), then one linear map from the Z
/// width to horizon times output channels, laid out as (B, H, N, D_out).
pub struct OutputHead<S: Scalar> {
    norm: LayerNorm<S>,
    ffn: Ffn<S>,
    proj: Linear<S>,
    horizon: usize,
    d_out: usize,
}

impl<S: Scalar> OutputHead<S> {
    pub fn new(
        name: &str,
        z_width: usize,
        horizon: usize,
        d_out: usize,
        mlp_ratio: f64,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if horizon == 0 || d_out == 0 {
            return Err(Error::config("horizon and output channels must be >= 1"));
        }
        Ok(OutputHead {
            norm: LayerNorm::new(&format!("{name}.norm"), z_width, true)?,
            ffn: Ffn::new(&format!("{name}.ffn"), z_width, mlp_ratio, dropout, true, rng)?,
            proj: Linear::new(&format!("{name}.proj"), z_width, horizon * d_out, true, true, rng)?,
            horizon,
            d_out,
        })
    }

    pub fn forward(&self, z: &Tensor<S>, ctx: &mut FwdCtx) -> Result<Tensor<S>> {
        let shape = z.shape().to_vec();
        let (b, n) = (shape[0], shape[1]);
        let y = self.norm.forward(z)?.add(&self.ffn.forward(z, ctx)?)?;
        let flat = self.proj.forward(&y)?;
        flat.reshape(&[b, n, self.horizon, self.d_out])?
            .permute(&[0, 2, 1, 3])
    }

    pub fn params(&self) -> Vec<Param<S>> {
        let mut p = self.norm.params();
        p.extend(self.ffn.params());
        p.extend(self.proj.params());
        p
    }
}

/// Backbone, enhancement branch, and head assembled into the full
/// prediction stage.
pub struct Predictor<S: Scalar> {
    backbone: Backbone<S>,
    enhancer: ResidualEnhancer<S>,
    head: OutputHead<S>,
}

impl<S: Scalar> Predictor<S> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        h_f_width: usize,
        d_r: usize,
        horizon: usize,
        d_out: usize,
        mlp_ratio: f64,
        dropout: f64,
        backbone: Backbone<S>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let z_width = backbone.out_width() + d_r;
        Ok(Predictor {
            backbone,
            enhancer: ResidualEnhancer::new(&format!("{name}.enhance"), h_f_width, d_r, rng)?,
            head: OutputHead::new(&format!("{name}.head"), z_width, horizon, d_out, mlp_ratio, dropout, rng)?,
        })
    }

    pub fn backbone(&self) -> &Backbone<S> {
        &self.backbone
    }

    pub fn z_width(&self) -> usize {
        self.backbone.out_width() + self.enhancer.out_width()
    }

    /// `zero_backbone` replaces the backbone output with zeros while the
    /// enhancement branch keeps running, the no-backbone ablation.
    pub fn forward(&self, h_f: &Tensor<S>, zero_backbone: bool, ctx: &mut FwdCtx) -> Result<Tensor<S>> {
        let shape = h_f.shape().to_vec();
        let backbone_out = if zero_backbone {
            Tensor::zeros(&[shape[0], shape[1], self.backbone.out_width()])
        } else {
            self.backbone.forward(h_f, ctx)?
        };
        let branch = self.enhancer.forward(h_f)?;
        let z = concat(&[&backbone_out, &branch], -1)?;
        self.head.forward(&z, ctx)
    }

    pub fn params(&self) -> Vec<Param<S>> {
        let mut p = self.backbone.params();
        p.extend(self.enhancer.params());
        p.extend(self.head.params());
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_gradients;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    struct IdentityBackbone {
        width: usize,
    }

    impl ExternalBackbone<f64> for IdentityBackbone {
        fn out_width(&self) -> usize {
            self.width
        }
        fn forward(&self, h_f: &Tensor<f64>, _ctx: &mut FwdCtx) -> Result<Tensor<f64>> {
            Ok(h_f.clone())
        }
    }

    struct MisshapenBackbone;

    impl ExternalBackbone<f64> for MisshapenBackbone {
        fn out_width(&self) -> usize {
            4
        }
        fn forward(&self, h_f: &Tensor<f64>, _ctx: &mut FwdCtx) -> Result<Tensor<f64>> {
            let shape = h_f.shape().to_vec();
            Ok(Tensor::zeros(&[shape[0], shape[1], 7]))
        }
    }

    #[test]
    fn identity_external_backbone_passes_input_through() {
        let backbone = Backbone::External(Box::new(IdentityBackbone { width: 5 }));
        let x = Tensor::constant((0..2 * 3 * 5).map(|i| i as f64).collect(), &[2, 3, 5]).unwrap();
        let mut r = rng(0);
        let mut ctx = FwdCtx::eval(&mut r);
        let out = backbone.forward(&x, &mut ctx).unwrap();
        assert_eq!(out.data(), x.data());
        assert_eq!(backbone.kind_name(), "external");
        assert!(!backbone.trainable());
    }

    #[test]
    fn external_shape_violation_is_a_contract_error() {
        let backbone = Backbone::External(Box::new(MisshapenBackbone));
        let x = Tensor::zeros(&[1, 2, 4]);
        let mut r = rng(0);
        let mut ctx = FwdCtx::eval(&mut r);
        let err = backbone.forward(&x, &mut ctx).unwrap_err();
        assert!(matches!(err, Error::Contract { .. }), "got {err}");
    }

    #[test]
    fn frozen_mlp_declares_untrainable_params() {
        let mut r = rng(1);
        let mlp = MlpBackbone::<f64>::new("b", 6, 4, 2.0, 0.0, true, &mut r).unwrap();
        assert!(mlp.frozen());
        for p in mlp.params() {
            assert!(!p.trainable());
            assert!(p.set_data(vec![0.0; p.numel()]).is_err());
        }
        let unfrozen = MlpBackbone::<f64>::new("b", 6, 4, 2.0, 0.0, false, &mut r).unwrap();
        assert!(unfrozen.params().iter().all(|p| p.trainable()));
    }

    #[test]
    fn zeroed_mlp_outputs_zero() {
        let mut r = rng(2);
        let mlp = MlpBackbone::<f64>::new("b", 3, 2, 1.5, 0.0, false, &mut r).unwrap();
        for p in mlp.params() {
            p.set_data(vec![0.0; p.numel()]).unwrap();
        }
        let x = Tensor::constant(vec![1.0, -2.0, 3.0, 0.5, 0.1, -0.9], &[1, 2, 3]).unwrap();
        let mut ctx = FwdCtx::eval(&mut r);
        let out = mlp.forward(&x, &mut ctx).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn dead_conv_branch_contributes_exact_zeros() {
        let mut r = rng(3);
        let enh = ResidualEnhancer::<f64>::new("e", 6, 3, &mut r).unwrap();
        enh.conv2.set_data(vec![0.0; 9]).unwrap();
        enh.conv2_bias.set_data(vec![0.0; 3]).unwrap();
        let x = Tensor::constant((0..2 * 4 * 6).map(|i| 0.1 * i as f64).collect(), &[2, 4, 6]).unwrap();
        let out = enh.forward(&x).unwrap();
        assert_eq!(out.shape(), &[2, 4, 3]);
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn enhancer_width_lands_on_z_width() {
        let mut r = rng(4);
        let backbone = Backbone::Mlp(MlpBackbone::new("b", 384, 256, 1.0, 0.0, false, &mut r).unwrap());
        let pred = Predictor::<f64>::new("p", 384, 128, 12, 1, 1.0, 0.0, backbone, &mut r).unwrap();
        assert_eq!(pred.z_width(), 384);
    }

    #[test]
    fn head_reduces_to_layer_norm_when_ffn_is_zero() {
        let mut r = rng(5);
        let head = OutputHead::<f64>::new("h", 4, 2, 1, 1.0, 0.0, &mut r).unwrap();
        head.ffn.lin2.weight.set_data(vec![0.0; 4 * 4]).unwrap();
        if let Some(b) = &head.ffn.lin2.bias {
            b.set_data(vec![0.0; 4]).unwrap();
        }
        let z = Tensor::constant(vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 2.0], &[1, 2, 4]).unwrap();
        let mut ctx = FwdCtx::eval(&mut r);
        let got = head.forward(&z, &mut ctx).unwrap();
        let expected = head
            .proj
            .forward(&head.norm.forward(&z).unwrap())
            .unwrap()
            .reshape(&[1, 2, 2, 1])
            .unwrap()
            .permute(&[0, 2, 1, 3])
            .unwrap();
        assert_eq!(got.shape(), &[1, 2, 2, 1]);
        for (a, b) in got.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn prediction_shape_is_batch_horizon_nodes_channels() {
        let mut r = rng(6);
        let backbone = Backbone::Mlp(MlpBackbone::new("b", 10, 6, 2.0, 0.0, false, &mut r).unwrap());
        let pred = Predictor::<f64>::new("p", 10, 4, 12, 1, 2.0, 0.0, backbone, &mut r).unwrap();
        let h_f = Tensor::constant(
            (0..3 * 5 * 10).map(|i| (i as f64 * 0.37).sin()).collect(),
            &[3, 5, 10],
        )
        .unwrap();
        let mut ctx = FwdCtx::eval(&mut r);
        let out = pred.forward(&h_f, false, &mut ctx).unwrap();
        assert_eq!(out.shape(), &[3, 12, 5, 1]);
        assert!(out.all_finite());
    }

    #[test]
    fn zero_backbone_mode_still_runs_the_branch() {
        let mut r = rng(7);
        let backbone = Backbone::Mlp(MlpBackbone::new("b", 6, 4, 1.0, 0.0, false, &mut r).unwrap());
        let pred = Predictor::<f64>::new("p", 6, 3, 2, 1, 1.0, 0.0, backbone, &mut r).unwrap();
        let h_f = Tensor::constant((0..2 * 2 * 6).map(|i| 0.2 * i as f64).collect(), &[2, 2, 6]).unwrap();
        let mut ctx = FwdCtx::eval(&mut r);
        let full = pred.forward(&h_f, false, &mut ctx).unwrap();
        let gutted = pred.forward(&h_f, true, &mut ctx).unwrap();
        assert_eq!(full.shape(), gutted.shape());
        let diff: f64 = full
            .data()
            .iter()
            .zip(gutted.data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-9, "backbone had no effect");
    }

    #[test]
    fn gradients_flow_through_both_branches_of_the_residual_pipeline() {
        let mut r = rng(8);
        let backbone = Backbone::Mlp(MlpBackbone::new("b", 5, 3, 1.0, 0.0, false, &mut r).unwrap());
        let pred = Predictor::<f64>::new("p", 5, 2, 2, 1, 1.0, 0.0, backbone, &mut r).unwrap();
        let mut input_rng = rng(9);
        let h0: Vec<f64> = (0..2 * 3 * 5).map(|_| input_rng.random_range(-1.0..1.0)).collect();
        let report = check_gradients(&[(h0, vec![2, 3, 5])], 1e-5, 1e-3, |inputs| {
            let mut rr = rng(0);
            let mut ctx = FwdCtx::eval(&mut rr);
            Ok(pred.forward(&inputs[0], false, &mut ctx)?.sum_all())
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }
}
