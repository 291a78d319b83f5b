use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array2, Array3, Array4, ArrayD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm2d, Bottleneck, Conv2d, GlobalAvgPool, Layer, Linear, MaxPool2d, Relu, Sequential, Slot};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    SmallCnn,
    Resnet50Pretrained,
}

impl Backbone {
    pub fn as_str(self) -> &'static str {
        match self {
            Backbone::SmallCnn => "small_cnn",
            Backbone::Resnet50Pretrained => "resnet50_pretrained",
        }
    }
}

impl std::str::FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small_cnn" => Ok(Backbone::SmallCnn),
            "resnet50_pretrained" => Ok(Backbone::Resnet50Pretrained),
            other => Err(Error::config(
                "train.backbone",
                format!("unknown backbone `{other}` (expected small_cnn or resnet50_pretrained)"),
            )),
        }
    }
}

/// ImageNet channel statistics used by torchvision ResNet weights.
const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

const SMALL_CNN_CHANNELS: [usize; 4] = [16, 32, 64, 64];

/// Convolutional feature extractor, global pooling and a linear head.
pub struct Network {
    backbone: Backbone,
    stages: Vec<(String, Box<dyn Layer>)>,
    pool: GlobalAvgPool,
    head: Linear,
    input_norm: Option<([f32; 3], [f32; 3])>,
}

/// Logits and penultimate features of one forward pass.
pub struct Forward {
    pub logits: Array2<f32>,
    pub features: Array2<f32>,
}

impl Network {
    /// Four conv-bn-relu blocks (three followed by 2x2 max pooling), global
    /// average pooling and a linear head.
    pub fn small_cnn(num_outputs: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages: Vec<(String, Box<dyn Layer>)> = Vec::new();
        let mut in_ch = 3;
        for (i, &out_ch) in SMALL_CNN_CHANNELS.iter().enumerate() {
            let mut conv = Conv2d::new(in_ch, out_ch, 3, 1, 1, false, &mut rng);
            conv.input_grad = i > 0;
            let mut block =
                Sequential::new().push("conv", conv).push("bn", BatchNorm2d::new(out_ch)).push("relu", Relu::default());
            if i + 1 < SMALL_CNN_CHANNELS.len() {
                block = block.push("pool", MaxPool2d::new(2, 2, 0));
            }
            stages.push((format!("block{}", i + 1), Box::new(block)));
            in_ch = out_ch;
        }
        Self {
            backbone: Backbone::SmallCnn,
            stages,
            pool: GlobalAvgPool::default(),
            head: Linear::new(in_ch, num_outputs, &mut rng),
            input_norm: None,
        }
    }

    /// Randomly initialised ResNet-50 with torchvision parameter names.
    pub fn resnet50(num_outputs: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut conv1 = Conv2d::new(3, 64, 7, 2, 3, false, &mut rng);
        conv1.input_grad = false;
        let mut stages: Vec<(String, Box<dyn Layer>)> = vec![
            ("conv1".into(), Box::new(conv1)),
            ("bn1".into(), Box::new(BatchNorm2d::new(64))),
            ("relu".into(), Box::new(Relu::default())),
            ("maxpool".into(), Box::new(MaxPool2d::new(3, 2, 1))),
        ];
        let mut in_ch = 64;
        for (i, (&blocks, &width)) in [3usize, 4, 6, 3].iter().zip(&[64usize, 128, 256, 512]).enumerate() {
            let mut layer = Sequential::new();
            for b in 0..blocks {
                let stride = if b == 0 && i > 0 { 2 } else { 1 };
                layer = layer.push(b.to_string(), Bottleneck::new(in_ch, width, stride, &mut rng));
                in_ch = width * 4;
            }
            stages.push((format!("layer{}", i + 1), Box::new(layer)));
        }
        Self {
            backbone: Backbone::Resnet50Pretrained,
            stages,
            pool: GlobalAvgPool::default(),
            head: Linear::new(in_ch, num_outputs, &mut rng),
            input_norm: Some((IMAGENET_MEAN, IMAGENET_STD)),
        }
    }

    /// ResNet-50 whose feature extractor is loaded from a safetensors file in
    /// torchvision naming. The head is freshly initialised.
    pub fn resnet50_pretrained(weights: Option<&Path>, num_outputs: usize, seed: u64) -> Result<Self> {
        let path = weights.ok_or_else(|| {
            Error::PretrainedUnavailable("train.pretrained_weights is not set; refusing to use random weights".into())
        })?;
        if !path.is_file() {
            return Err(Error::PretrainedUnavailable(format!(
                "{} does not exist; refusing to use random weights",
                path.display()
            )));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let tensors = read_safetensors(&bytes).map_err(|m| Error::PretrainedUnavailable(format!("{}: {m}", path.display())))?;
        let mut net = Self::resnet50(num_outputs, seed);
        let backbone: HashMap<String, ArrayD<f32>> = tensors.into_iter().filter(|(k, _)| !k.starts_with("fc.")).collect();
        net.load_partial(&backbone, |name| name.starts_with("fc."))
            .map_err(|m| Error::PretrainedUnavailable(format!("{}: {m}", path.display())))?;
        Ok(net)
    }

    pub fn backbone(&self) -> Backbone {
        self.backbone
    }

    pub fn num_outputs(&self) -> usize {
        self.head.out_features()
    }

    pub fn feature_dim(&self) -> usize {
        self.head.in_features()
    }

    /// Shape of the head weight matrix `(outputs, features)`.
    pub fn head_shape(&self) -> (usize, usize) {
        (self.num_outputs(), self.feature_dim())
    }

    /// Name of the last convolutional stage, the default Grad-CAM target.
    pub fn last_stage(&self) -> &str {
        &self.stages.last().expect("network has stages").0
    }

    fn normalize(&self, mut x: Array4<f32>) -> Array4<f32> {
        if let Some((mean, std)) = self.input_norm {
            for (c, mut plane) in x.axis_iter_mut(Axis(1)).enumerate() {
                plane.mapv_inplace(|v| (v - mean[c]) / std[c]);
            }
        }
        x
    }

    /// Forward pass on an NCHW batch with values in `[0, 1]`.
    pub fn forward(&mut self, x: Array4<f32>, train: bool) -> Forward {
        let mut h = self.normalize(x);
        for (_, stage) in &mut self.stages {
            h = stage.forward(h, train);
        }
        self.head_forward(h, train)
    }

    fn head_forward(&mut self, h: Array4<f32>, train: bool) -> Forward {
        let pooled = self.pool.forward(h, train);
        let n = pooled.dim().0;
        let features = pooled.clone().into_shape_with_order((n, self.feature_dim())).expect("pooled shape");
        let logits = self.head.forward(pooled, train);
        let logits = logits.into_shape_with_order((n, self.num_outputs())).expect("logit shape");
        Forward { logits, features }
    }

    /// Backpropagates logit gradients through the last forward pass.
    pub fn backward(&mut self, dlogits: &Array2<f32>) {
        let (n, k) = dlogits.dim();
        let mut g = self.head.backward(dlogits.clone().into_shape_with_order((n, k, 1, 1)).expect("shape"));
        g = self.pool.backward(g);
        for (_, stage) in self.stages.iter_mut().rev() {
            g = stage.backward(g);
        }
    }

    /// Activations of the named stage and the gradient of `logits[class]`
    /// with respect to them, for one image in evaluation mode.
    pub fn activation_and_grad(&mut self, image: Array3<f32>, class: usize, stage: &str) -> Result<(Array3<f32>, Array3<f32>)> {
        let idx =
            self.stages.iter().position(|(n, _)| n == stage).ok_or_else(|| Error::Explain(format!("unknown layer `{stage}`")))?;
        if class >= self.num_outputs() {
            return Err(Error::Explain(format!("class {class} out of range")));
        }
        let mut h = self.normalize(image.insert_axis(Axis(0)));
        let mut act = None;
        for (i, (_, s)) in self.stages.iter_mut().enumerate() {
            h = s.forward(h, false);
            if i == idx {
                act = Some(h.clone());
            }
        }
        let _ = self.head_forward(h, false);
        let mut onehot = Array4::zeros((1, self.num_outputs(), 1, 1));
        onehot[[0, class, 0, 0]] = 1.0;
        let mut g = self.head.backward(onehot);
        g = self.pool.backward(g);
        for (i, (_, s)) in self.stages.iter_mut().enumerate().rev() {
            if i == idx {
                break;
            }
            g = s.backward(g);
        }
        // Parameter gradients from this pass are not meant for training.
        self.zero_grad();
        let act = act.expect("stage visited").index_axis_move(Axis(0), 0);
        Ok((act, g.index_axis_move(Axis(0), 0)))
    }

    /// Re-estimates batch-norm running statistics as the plain average over
    /// `batches` under the current weights. Parameters are left untouched.
    pub fn recalibrate_batchnorm(&mut self, batches: impl IntoIterator<Item = Array4<f32>>) {
        let mut momenta = Vec::new();
        self.visit_batchnorm(&mut |bn| {
            momenta.push(bn.momentum);
            bn.running_mean.fill(0.0);
            bn.running_var.fill(0.0);
        });
        let mut seen = 0usize;
        for x in batches {
            seen += 1;
            let m = 1.0 / seen as f32;
            self.visit_batchnorm(&mut |bn| bn.momentum = m);
            let mut h = self.normalize(x);
            for (_, stage) in &mut self.stages {
                h = stage.forward(h, true);
            }
        }
        let mut i = 0;
        self.visit_batchnorm(&mut |bn| {
            bn.momentum = momenta[i];
            if seen == 0 {
                bn.running_var.fill(1.0);
            }
            i += 1;
        });
    }

    fn visit_batchnorm(&mut self, f: &mut dyn FnMut(&mut BatchNorm2d)) {
        for (_, stage) in &mut self.stages {
            stage.visit_batchnorm(f);
        }
    }

    pub fn visit(&mut self, f: &mut dyn FnMut(String, Slot<'_>)) {
        for (name, stage) in &mut self.stages {
            stage.visit(name, f);
        }
        self.head.visit("fc", f);
    }

    pub fn zero_grad(&mut self) {
        self.visit(&mut |_, slot| {
            if let Slot::Param(p) = slot {
                p.grad.fill(0.0);
            }
        });
    }

    pub fn num_parameters(&mut self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, slot| {
            if let Slot::Param(p) = slot {
                n += p.value.len();
            }
        });
        n
    }

    /// All parameters and buffers by name, in a fixed order.
    pub fn state(&mut self) -> Vec<(String, ArrayD<f32>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, slot| match slot {
            Slot::Param(p) => out.push((name, p.value.clone())),
            Slot::Buffer(b) => out.push((name, b.clone())),
        });
        out
    }

    /// Replaces every parameter and buffer; names and shapes must match.
    pub fn load_state(&mut self, state: &HashMap<String, ArrayD<f32>>) -> std::result::Result<(), String> {
        let expected = self.state().len();
        if state.len() != expected {
            return Err(format!("expected {expected} tensors, found {}", state.len()));
        }
        self.load_partial(state, |_| false)
    }

    fn load_partial(
        &mut self,
        state: &HashMap<String, ArrayD<f32>>,
        skip: impl Fn(&str) -> bool,
    ) -> std::result::Result<(), String> {
        let mut problem = None;
        self.visit(&mut |name, slot| {
            if problem.is_some() || skip(&name) {
                return;
            }
            let dst = match slot {
                Slot::Param(p) => &mut p.value,
                Slot::Buffer(b) => b,
            };
            match state.get(&name) {
                None => problem = Some(format!("missing tensor `{name}`")),
                Some(src) if src.shape() != dst.shape() => {
                    problem = Some(format!("tensor `{name}` has shape {:?}, expected {:?}", src.shape(), dst.shape()))
                }
                Some(src) => dst.assign(src),
            }
        });
        problem.map_or(Ok(()), Err)
    }
}

/// Decodes every F32 tensor of a safetensors buffer.
pub(crate) fn read_safetensors(bytes: &[u8]) -> std::result::Result<HashMap<String, ArrayD<f32>>, String> {
    let st = safetensors::SafeTensors::deserialize(bytes).map_err(|e| e.to_string())?;
    let mut out = HashMap::new();
    for (name, view) in st.tensors() {
        if name.ends_with("num_batches_tracked") {
            continue;
        }
        if view.dtype() != safetensors::Dtype::F32 {
            return Err(format!("tensor `{name}` has dtype {:?}, expected F32", view.dtype()));
        }
        let data: Vec<f32> = view.data().chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        let arr = ArrayD::from_shape_vec(view.shape().to_vec(), data).map_err(|e| e.to_string())?;
        out.insert(name, arr);
    }
    Ok(out)
}

/// Encodes tensors and string metadata as a safetensors buffer.
pub(crate) fn write_safetensors(
    tensors: &[(String, ArrayD<f32>)],
    metadata: HashMap<String, String>,
) -> std::result::Result<Vec<u8>, String> {
    let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = tensors
        .iter()
        .map(|(n, a)| {
            let data = a.iter().flat_map(|v| v.to_le_bytes()).collect();
            (n.clone(), a.shape().to_vec(), data)
        })
        .collect();
    let views = bytes
        .iter()
        .map(|(n, s, d)| {
            safetensors::tensor::TensorView::new(safetensors::Dtype::F32, s.clone(), d)
                .map(|v| (n.clone(), v))
                .map_err(|e| e.to_string())
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    safetensors::serialize(views, Some(metadata)).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(n: usize, size: usize) -> Array4<f32> {
        Array4::from_shape_fn((n, 3, size, size), |(i, c, y, x)| ((i * 7 + c * 3 + y * 5 + x) % 11) as f32 / 10.0)
    }

    #[test]
    fn small_cnn_shapes() {
        let mut net = Network::small_cnn(5, 0);
        let out = net.forward(batch(3, 64), false);
        assert_eq!(out.logits.dim(), (3, 5));
        assert_eq!(out.features.dim(), (3, 64));
        assert_eq!(net.head_shape(), (5, 64));
    }

    #[test]
    fn features_have_fixed_width() {
        let mut net = Network::small_cnn(5, 0);
        let a = net.forward(batch(1, 32), false).features;
        let b = net.forward(Array4::zeros((2, 3, 48, 48)), false).features;
        assert_eq!(a.ncols(), b.ncols());
    }

    #[test]
    fn resnet50_layout_matches_torchvision() {
        let mut net = Network::resnet50(1000, 0);
        assert_eq!(net.num_parameters(), 25_557_032);
        let names: Vec<String> = net.state().into_iter().map(|(n, _)| n).collect();
        for expected in [
            "conv1.weight",
            "bn1.running_var",
            "layer1.0.downsample.0.weight",
            "layer4.2.conv3.weight",
            "layer4.2.bn3.bias",
            "fc.weight",
        ] {
            assert!(names.iter().any(|n| n == expected), "missing {expected}");
        }
        let mut net5 = Network::resnet50(5, 0);
        assert_eq!(net5.head_shape(), (5, 2048));
        let out = net5.forward(batch(1, 32), false);
        assert_eq!(out.logits.dim(), (1, 5));
    }

    #[test]
    fn pretrained_requires_weights() {
        assert!(matches!(Network::resnet50_pretrained(None, 5, 0), Err(Error::PretrainedUnavailable(_))));
        let missing = Path::new("/nonexistent/resnet50.safetensors");
        assert!(matches!(Network::resnet50_pretrained(Some(missing), 5, 0), Err(Error::PretrainedUnavailable(_))));
    }

    #[test]
    fn pretrained_loads_backbone_and_replaces_head() {
        let mut source = Network::resnet50(1000, 3);
        let state = source.state();
        let bytes = write_safetensors(&state, HashMap::new()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("resnet50.safetensors");
        std::fs::write(&path, bytes).unwrap();
        let mut net = Network::resnet50_pretrained(Some(&path), 5, 0).unwrap();
        let loaded: HashMap<String, ArrayD<f32>> = net.state().into_iter().collect();
        let original: HashMap<String, ArrayD<f32>> = state.into_iter().collect();
        assert_eq!(loaded["layer3.4.conv2.weight"], original["layer3.4.conv2.weight"]);
        assert_eq!(loaded["fc.weight"].shape(), &[5, 2048]);
    }

    #[test]
    fn state_round_trip() {
        let mut a = Network::small_cnn(5, 1);
        a.forward(batch(4, 16), true);
        let mut b = Network::small_cnn(5, 2);
        let state: HashMap<String, ArrayD<f32>> = a.state().into_iter().collect();
        b.load_state(&state).unwrap();
        let probe = batch(2, 16);
        assert_eq!(a.forward(probe.clone(), false).logits, b.forward(probe, false).logits);
    }

    #[test]
    fn recalibration_averages_batch_statistics() {
        let mut net = Network::small_cnn(5, 0);
        let a = batch(4, 16);
        let b = batch(4, 16).mapv(|v| 1.0 - v);
        net.recalibrate_batchnorm([a.clone(), b.clone()]);
        let mut mean_a = Network::small_cnn(5, 0);
        mean_a.recalibrate_batchnorm([a]);
        let mut mean_b = Network::small_cnn(5, 0);
        mean_b.recalibrate_batchnorm([b]);
        let get =
            |n: &mut Network| -> ArrayD<f32> { n.state().into_iter().find(|(k, _)| k == "block1.bn.running_mean").unwrap().1 };
        let expected = (get(&mut mean_a) + get(&mut mean_b)) / 2.0;
        let got = get(&mut net);
        assert!(got.iter().zip(expected.iter()).all(|(x, y)| (x - y).abs() < 1e-5));
    }

    #[test]
    fn activation_grad_shapes() {
        let mut net = Network::small_cnn(5, 0);
        let img = batch(1, 32).index_axis_move(Axis(0), 0);
        let (act, grad) = net.activation_and_grad(img, 2, "block4").unwrap();
        assert_eq!(act.dim(), (64, 4, 4));
        assert_eq!(grad.dim(), act.dim());
        assert!(net.activation_and_grad(batch(1, 32).index_axis_move(Axis(0), 0), 2, "nope").is_err());
    }
}
