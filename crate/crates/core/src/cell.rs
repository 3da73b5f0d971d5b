//! Convolutional GRU cells.
//!
//! One step of the cell computes
//!
//! ```text
//! z  = sigmoid(W_hz * h + W_xz * x + b_z)
//! r  = sigmoid(W_hr * h + W_xr * x + b_r)
//! h^ = tanh(W_h * (r . h) + W_x * x + b)
//! h' = (1 - z) . h + z . h^
//! ```
//!
//! where `*` is a same-padded convolution and `.` the elementwise product.
//! The coordinate variant appends two normalized coordinate maps to every
//! convolution operand, so each of the six kernels sees `C + 2` input channels.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::shape_err;
use crate::init::xavier_conv;
use crate::tensor::ConvSpec;
use crate::{Error, Real, Result, Tape, Tensor, Var};

/// Which module sits on the hourglass skip connections.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CellKind {
    /// Plain convolution, no recurrent state.
    None,
    ConvGru,
    CoordConvGru,
}

impl CellKind {
    pub const ALL: [CellKind; 3] = [CellKind::None, CellKind::ConvGru, CellKind::CoordConvGru];

    pub fn is_recurrent(self) -> bool {
        self != CellKind::None
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CellKind::None => "none",
            CellKind::ConvGru => "convgru",
            CellKind::CoordConvGru => "coordconvgru",
        })
    }
}

impl FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" | "baseline" => Ok(CellKind::None),
            "convgru" => Ok(CellKind::ConvGru),
            "coordconvgru" => Ok(CellKind::CoordConvGru),
            other => Err(Error::Invalid(format!("unknown cell kind {other:?}"))),
        }
    }
}

/// Coordinate maps `[2, H, W]`: channel 0 is x, channel 1 is y, each ramping
/// linearly from -1 to 1. A dimension of length one maps to 0.
pub fn coord_channels<T: Real>(height: usize, width: usize) -> Tensor<T> {
    let ramp = |i: usize, n: usize| {
        if n <= 1 {
            0.0
        } else {
            -1.0 + 2.0 * i as f64 / (n - 1) as f64
        }
    };
    let mut data = Vec::with_capacity(2 * height * width);
    for _ in 0..height {
        for x in 0..width {
            data.push(T::from_f64_lossy(ramp(x, width)));
        }
    }
    for y in 0..height {
        let v = T::from_f64_lossy(ramp(y, height));
        data.extend(std::iter::repeat(v).take(width));
    }
    Tensor::new(&[2, height, width], data).expect("coord shape")
}

/// Zero hidden state for the start of a sequence.
pub fn init_hidden<T: Real>(channels: usize, height: usize, width: usize) -> Tensor<T> {
    Tensor::zeros(&[channels, height, width])
}

/// The nine parameter arrays of one GRU cell.
///
/// `P` is `Tensor<T>` for stored weights and [`Var`] once bound to a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams<P> {
    pub w_hz: P,
    pub w_xz: P,
    pub b_z: P,
    pub w_hr: P,
    pub w_xr: P,
    pub b_r: P,
    pub w_h: P,
    pub w_x: P,
    pub b: P,
    coord: bool,
}

impl<P> GruParams<P> {
    pub const NAMES: [&'static str; 9] =
        ["w_hz", "w_xz", "b_z", "w_hr", "w_xr", "b_r", "w_h", "w_x", "b"];

    /// Whether the convolutions expect two extra coordinate channels.
    pub fn is_coord(&self) -> bool {
        self.coord
    }

    pub fn kind(&self) -> CellKind {
        if self.coord {
            CellKind::CoordConvGru
        } else {
            CellKind::ConvGru
        }
    }

    pub fn map<'a, Q>(&'a self, mut f: impl FnMut(&'static str, &'a P) -> Q) -> GruParams<Q> {
        GruParams {
            w_hz: f("w_hz", &self.w_hz),
            w_xz: f("w_xz", &self.w_xz),
            b_z: f("b_z", &self.b_z),
            w_hr: f("w_hr", &self.w_hr),
            w_xr: f("w_xr", &self.w_xr),
            b_r: f("b_r", &self.b_r),
            w_h: f("w_h", &self.w_h),
            w_x: f("w_x", &self.w_x),
            b: f("b", &self.b),
            coord: self.coord,
        }
    }

    pub fn try_map<Q, E>(
        &self,
        mut f: impl FnMut(&'static str, &P) -> std::result::Result<Q, E>,
    ) -> std::result::Result<GruParams<Q>, E> {
        Ok(GruParams {
            w_hz: f("w_hz", &self.w_hz)?,
            w_xz: f("w_xz", &self.w_xz)?,
            b_z: f("b_z", &self.b_z)?,
            w_hr: f("w_hr", &self.w_hr)?,
            w_xr: f("w_xr", &self.w_xr)?,
            b_r: f("b_r", &self.b_r)?,
            w_h: f("w_h", &self.w_h)?,
            w_x: f("w_x", &self.w_x)?,
            b: f("b", &self.b)?,
            coord: self.coord,
        })
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&'static str, &mut P)) {
        f("w_hz", &mut self.w_hz);
        f("w_xz", &mut self.w_xz);
        f("b_z", &mut self.b_z);
        f("w_hr", &mut self.w_hr);
        f("w_xr", &mut self.w_xr);
        f("b_r", &mut self.b_r);
        f("w_h", &mut self.w_h);
        f("w_x", &mut self.w_x);
        f("b", &mut self.b);
    }

    /// Builds a parameter set from values listed in [`Self::NAMES`] order.
    pub fn from_ordered(values: [P; 9], coord: bool) -> Self {
        let [w_hz, w_xz, b_z, w_hr, w_xr, b_r, w_h, w_x, b] = values;
        Self {
            w_hz,
            w_xz,
            b_z,
            w_hr,
            w_xr,
            b_r,
            w_h,
            w_x,
            b,
            coord,
        }
    }
}

impl<T: Real> GruParams<Tensor<T>> {
    fn weight_spec(channels: usize, kernel: usize, coord: bool) -> Result<ConvSpec> {
        ConvSpec::new(channels + if coord { 2 } else { 0 }, channels, kernel)
    }

    pub fn zeros(channels: usize, kernel: usize, coord: bool) -> Result<Self> {
        let spec = Self::weight_spec(channels, kernel, coord)?;
        let w = || Tensor::zeros(&spec.weight_shape());
        let b = || Tensor::zeros(&[channels]);
        Ok(Self::from_ordered(
            [w(), w(), b(), w(), w(), b(), w(), w(), b()],
            coord,
        ))
    }

    /// Xavier-uniform kernels, zero biases.
    pub fn xavier<R: Rng + ?Sized>(
        channels: usize,
        kernel: usize,
        coord: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let spec = Self::weight_spec(channels, kernel, coord)?;
        let mut p = Self::zeros(channels, kernel, coord)?;
        p.for_each_mut(|name, t| {
            if name.starts_with('w') {
                *t = xavier_conv(&spec, rng);
            }
        });
        Ok(p)
    }

    /// Uniform random values in `±scale` for every array, biases included.
    pub fn random<R: Rng + ?Sized>(
        channels: usize,
        kernel: usize,
        coord: bool,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut p = Self::zeros(channels, kernel, coord)?;
        p.for_each_mut(|_, t| *t = Tensor::uniform(t.shape(), -scale, scale, rng));
        Ok(p)
    }

    pub fn channels(&self) -> usize {
        self.b.len()
    }

    pub fn kernel(&self) -> usize {
        self.w_hz.shape()[2]
    }

    /// Checks the weight shapes against the channel count and coord flag.
    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        let spec = Self::weight_spec(c, self.kernel(), self.coord)?;
        let mut problem = None;
        self.map(|name, t| {
            let want: Vec<usize> = if name.starts_with('w') {
                spec.weight_shape().to_vec()
            } else {
                vec![c]
            };
            if t.shape() != want.as_slice() && problem.is_none() {
                problem = Some(format!("{name} has shape {:?}, expected {want:?}", t.shape()));
            }
        });
        match problem {
            Some(p) => Err(shape_err("GruParams", p)),
            None => Ok(()),
        }
    }

    /// Embeds plain weights into a coordinate cell whose coordinate-channel
    /// weights are zero.
    pub fn with_coord_channels(&self) -> Self {
        if self.coord {
            return self.clone();
        }
        let mut out = self.map(|name, t| {
            if !name.starts_with('w') {
                return t.clone();
            }
            let (co, ci, k) = (t.shape()[0], t.shape()[1], t.shape()[2]);
            let kk = k * k;
            let mut data = vec![T::zero(); co * (ci + 2) * kk];
            for o in 0..co {
                let src = &t.data()[o * ci * kk..(o + 1) * ci * kk];
                data[o * (ci + 2) * kk..o * (ci + 2) * kk + ci * kk].copy_from_slice(src);
            }
            Tensor::new(&[co, ci + 2, k, k], data).expect("coord weight shape")
        });
        out.coord = true;
        out
    }

    /// Drops the coordinate-channel weights of a coordinate cell.
    pub fn without_coord_channels(&self) -> Self {
        if !self.coord {
            return self.clone();
        }
        let mut out = self.map(|name, t| {
            if !name.starts_with('w') {
                return t.clone();
            }
            let (co, ci, k) = (t.shape()[0], t.shape()[1] - 2, t.shape()[2]);
            let kk = k * k;
            let mut data = Vec::with_capacity(co * ci * kk);
            for o in 0..co {
                let start = o * (ci + 2) * kk;
                data.extend_from_slice(&t.data()[start..start + ci * kk]);
            }
            Tensor::new(&[co, ci, k, k], data).expect("plain weight shape")
        });
        out.coord = false;
        out
    }

    /// Mutable views of the coordinate-channel slices of every kernel.
    pub fn for_each_coord_weight_mut(&mut self, mut f: impl FnMut(&mut T)) {
        if !self.coord {
            return;
        }
        self.for_each_mut(|name, t| {
            if !name.starts_with('w') {
                return;
            }
            let (co, ci, k) = (t.shape()[0], t.shape()[1], t.shape()[2]);
            let kk = k * k;
            for o in 0..co {
                let start = (o * ci + ci - 2) * kk;
                for v in &mut t.data_mut()[start..start + 2 * kk] {
                    f(v);
                }
            }
        });
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.map(|_, t| n += t.len());
        n
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> GruParams<Var> {
        self.map(|_, t| tape.leaf(t.clone()))
    }
}

/// Gate activations and new state of one cell step.
#[derive(Clone, Debug, PartialEq)]
pub struct GruStepTrace<P> {
    pub z: P,
    pub r: P,
    pub h_hat: P,
    pub h: P,
}

impl GruStepTrace<Var> {
    pub fn values<T: Real>(&self, tape: &Tape<T>) -> GruStepTrace<Tensor<T>> {
        GruStepTrace {
            z: tape.value(self.z).clone(),
            r: tape.value(self.r).clone(),
            h_hat: tape.value(self.h_hat).clone(),
            h: tape.value(self.h).clone(),
        }
    }
}

/// Records one cell step on `tape`. Dispatches on the parameters' coord flag.
pub fn gru_step<T: Real>(
    tape: &mut Tape<T>,
    p: &GruParams<Var>,
    h_prev: Var,
    x: Var,
) -> Result<GruStepTrace<Var>> {
    if tape.shape(h_prev) != tape.shape(x) {
        return Err(shape_err(
            "gru_step",
            format!(
                "hidden {:?} vs input {:?}",
                tape.shape(h_prev),
                tape.shape(x)
            ),
        ));
    }
    let (_, height, width) = tape.value(x).chw("gru_step")?;

    let coords = p
        .coord
        .then(|| tape.constant(coord_channels(height, width)));
    let with_coords = |tape: &mut Tape<T>, v: Var| match coords {
        Some(c) => tape.concat_channels(v, c),
        None => Ok(v),
    };
    let hs = with_coords(tape, h_prev)?;
    let xs = with_coords(tape, x)?;

    let zh = tape.conv2d(hs, p.w_hz, Some(p.b_z))?;
    let zx = tape.conv2d(xs, p.w_xz, None)?;
    let z_pre = tape.add(zh, zx)?;
    let z = tape.sigmoid(z_pre);

    let rh = tape.conv2d(hs, p.w_hr, Some(p.b_r))?;
    let rx = tape.conv2d(xs, p.w_xr, None)?;
    let r_pre = tape.add(rh, rx)?;
    let r = tape.sigmoid(r_pre);

    let rh_prod = tape.mul(r, h_prev)?;
    let rh_in = with_coords(tape, rh_prod)?;
    let ch = tape.conv2d(rh_in, p.w_h, Some(p.b))?;
    let cx = tape.conv2d(xs, p.w_x, None)?;
    let cand_pre = tape.add(ch, cx)?;
    let h_hat = tape.tanh(cand_pre);

    let keep = tape.one_minus(z);
    let kept = tape.mul(keep, h_prev)?;
    let fresh = tape.mul(z, h_hat)?;
    let h = tape.add(kept, fresh)?;
    Ok(GruStepTrace { z, r, h_hat, h })
}

fn eval_step<T: Real>(
    p: &GruParams<Tensor<T>>,
    h_prev: &Tensor<T>,
    x: &Tensor<T>,
) -> Result<GruStepTrace<Tensor<T>>> {
    p.validate()?;
    let mut tape = Tape::new();
    let pv = p.map(|_, t| tape.constant(t.clone()));
    let h = tape.constant(h_prev.clone());
    let xv = tape.constant(x.clone());
    let trace = gru_step(&mut tape, &pv, h, xv)?;
    Ok(trace.values(&tape))
}

/// One ConvGRU step on stored tensors.
pub fn conv_gru_step<T: Real>(
    p: &GruParams<Tensor<T>>,
    h_prev: &Tensor<T>,
    x: &Tensor<T>,
) -> Result<GruStepTrace<Tensor<T>>> {
    if p.coord {
        return Err(Error::Invalid(
            "conv_gru_step given coordinate-channel parameters".into(),
        ));
    }
    eval_step(p, h_prev, x)
}

/// One CoordConvGRU step on stored tensors.
pub fn coord_conv_gru_step<T: Real>(
    p: &GruParams<Tensor<T>>,
    h_prev: &Tensor<T>,
    x: &Tensor<T>,
) -> Result<GruStepTrace<Tensor<T>>> {
    if !p.coord {
        return Err(Error::Invalid(
            "coord_conv_gru_step given parameters without coordinate channels".into(),
        ));
    }
    eval_step(p, h_prev, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn coord_maps_ramp_from_minus_one_to_one() {
        let c: Tensor<f64> = coord_channels(3, 3);
        for y in 0..3 {
            assert_eq!(
                [c.at3(0, y, 0), c.at3(0, y, 1), c.at3(0, y, 2)],
                [-1.0, 0.0, 1.0]
            );
        }
        assert_eq!([c.at3(1, 0, 2), c.at3(1, 2, 0)], [-1.0, 1.0]);
        let c: Tensor<f64> = coord_channels(5, 8);
        assert_eq!((c.at3(0, 0, 0), c.at3(1, 0, 0)), (-1.0, -1.0));
        let c: Tensor<f64> = coord_channels(1, 1);
        assert_eq!(c.data(), &[0.0, 0.0]);
    }

    #[test]
    fn zero_params_halve_the_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for coord in [false, true] {
            let p = GruParams::<Tensor<f64>>::zeros(3, 3, coord).unwrap();
            let h = Tensor::uniform(&[3, 4, 5], -1.0, 1.0, &mut rng);
            let x = Tensor::uniform(&[3, 4, 5], -1.0, 1.0, &mut rng);
            let tr = eval_step(&p, &h, &x).unwrap();
            assert!(tr.z.data().iter().all(|&v| v == 0.5));
            assert!(tr.r.data().iter().all(|&v| v == 0.5));
            assert!(tr.h_hat.data().iter().all(|&v| v == 0.0));
            assert!(tr.h.max_abs_diff(&h.scale(0.5)) == 0.0);
        }
    }

    #[test]
    fn saturated_update_gate_takes_candidate() {
        let mut p = GruParams::<Tensor<f64>>::zeros(2, 3, false).unwrap();
        p.b_z = Tensor::full(&[2], 20.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = Tensor::uniform(&[2, 3, 3], -1.0, 1.0, &mut rng);
        let x = Tensor::uniform(&[2, 3, 3], -1.0, 1.0, &mut rng);
        let tr = conv_gru_step(&p, &h, &x).unwrap();
        assert!(tr.z.data().iter().all(|&v| v > 1.0 - 1e-8));
        assert!(tr.h.data().iter().all(|&v| v.abs() < 1e-8));
    }

    #[test]
    fn zero_state_and_zero_params_stay_zero() {
        let p = GruParams::<Tensor<f64>>::zeros(1, 3, false).unwrap();
        let h0 = init_hidden::<f64>(1, 2, 2);
        assert_eq!(h0.shape(), &[1, 2, 2]);
        assert_eq!(h0.l2_norm(), 0.0);
        let x = Tensor::ones(&[1, 2, 2]);
        let tr = conv_gru_step(&p, &h0, &x).unwrap();
        assert!(tr.h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn step_rejects_mismatched_shapes_and_wrong_kind() {
        let p = GruParams::<Tensor<f64>>::zeros(2, 3, false).unwrap();
        let h = Tensor::zeros(&[2, 4, 4]);
        assert!(conv_gru_step(&p, &h, &Tensor::zeros(&[2, 4, 2])).is_err());
        assert!(conv_gru_step(&p, &h, &Tensor::zeros(&[3, 4, 4])).is_err());
        assert!(coord_conv_gru_step(&p, &h, &h).is_err());
        let pc = p.with_coord_channels();
        assert!(conv_gru_step(&pc, &h, &h).is_err());
        assert!(coord_conv_gru_step(&pc, &h, &h).is_ok());
    }

    #[test]
    fn coord_embedding_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = GruParams::<Tensor<f64>>::xavier(3, 3, false, &mut rng).unwrap();
        let pc = p.with_coord_channels();
        assert!(pc.is_coord());
        pc.validate().unwrap();
        assert_eq!(pc.w_hz.shape(), &[3, 5, 3, 3]);
        assert_eq!(pc.without_coord_channels(), p);
        let mut pc2 = pc.clone();
        let mut n = 0;
        pc2.for_each_coord_weight_mut(|v| {
            assert_eq!(*v, 0.0);
            n += 1;
        });
        assert_eq!(n, 6 * 3 * 2 * 9);
        assert_eq!(pc.param_count() - p.param_count(), n);
    }

    #[test]
    fn cell_kind_parses() {
        for k in CellKind::ALL {
            assert_eq!(k.to_string().parse::<CellKind>().unwrap(), k);
        }
        assert!("lstm".parse::<CellKind>().is_err());
    }
}
