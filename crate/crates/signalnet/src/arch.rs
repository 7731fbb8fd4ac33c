//! Network layouts. All convolutions use kernel 3, same padding and stride 1.

use qsine_nn::{Activation, LayerSpec, Network, NetworkBuilder, Scalar};

use crate::error::{param_err, Result};

pub const KERNEL: usize = 3;
pub const DETECTION_DROPOUT: f64 = 0.7;

fn relu() -> LayerSpec {
    LayerSpec::Activation(Activation::Relu)
}

fn selu() -> LayerSpec {
    LayerSpec::Activation(Activation::Selu)
}

fn pool(size: usize) -> LayerSpec {
    LayerSpec::MaxPool1d { size }
}

/// Detection network: three conv/pool/batch-norm groups with 32, 64 and 128
/// filters (pools 2, 2, 4), flatten, dropout, dense 128 and 64 with ReLU and
/// an `m_max`-way softmax. Class `k` means `k + 1` sinusoids.
pub fn detection_network<T: Scalar>(n: usize, m_max: usize, seed: u64, dropout_seed: u64) -> Result<Network<T>> {
    if n % 16 != 0 || n == 0 || m_max < 1 {
        return param_err(format!("detection network needs N divisible by 16 and M >= 1 (N = {n}, M = {m_max})"));
    }
    let mut b = NetworkBuilder::<T>::new(seed);
    let x = b.input("frame", &[n, 2])?;
    let h = b.chain(
        "g",
        x,
        &[
            LayerSpec::conv(2, 32, KERNEL),
            relu(),
            pool(2),
            LayerSpec::batch_norm(32),
            LayerSpec::conv(32, 64, KERNEL),
            relu(),
            pool(2),
            LayerSpec::batch_norm(64),
            LayerSpec::conv(64, 128, KERNEL),
            relu(),
            pool(4),
            LayerSpec::batch_norm(128),
            LayerSpec::Flatten,
            LayerSpec::Dropout { rate: DETECTION_DROPOUT, seed: dropout_seed },
            LayerSpec::dense(n / 16 * 128, 128),
            relu(),
            LayerSpec::dense(128, 64),
            relu(),
            LayerSpec::dense(64, m_max),
            LayerSpec::Activation(Activation::Softmax),
        ],
    )?;
    b.output(h)?;
    Ok(b.build()?)
}

/// One estimator block with outputs `[amplitude, frequency, phase]`, each
/// `[batch, 1]`.
///
/// The frequency head sits on a branch with batch normalization, the phase
/// head branches off that branch after its first normalized group, and the
/// amplitude head uses a branch without normalization so the input scale
/// survives.
pub fn block_network<T: Scalar>(n: usize, seed: u64) -> Result<Network<T>> {
    if n % 4 != 0 || n == 0 {
        return param_err(format!("block network needs N divisible by 4, got {n}"));
    }
    let flat = n / 4 * 16;
    let head = |b: &mut NetworkBuilder<T>, name: &str, from| -> Result<usize> {
        Ok(b.chain(name, from, &[LayerSpec::Flatten, LayerSpec::dense(flat, 16), selu(), LayerSpec::dense(16, 1)])?)
    };
    let mut b = NetworkBuilder::<T>::new(seed);
    let x = b.input("frame", &[n, 2])?;
    let norm1 = b.chain("norm_a", x, &[LayerSpec::conv(2, 8, KERNEL), relu(), pool(2), LayerSpec::batch_norm(8)])?;
    let norm2 = b.chain("norm_b", norm1, &[LayerSpec::conv(8, 16, KERNEL), relu(), pool(2), LayerSpec::batch_norm(16)])?;
    let freq = head(&mut b, "freq", norm2)?;
    let ph = b.chain("phase_conv", norm1, &[LayerSpec::conv(8, 16, KERNEL), relu(), pool(2)])?;
    let phase = head(&mut b, "phase", ph)?;
    let raw = b.chain(
        "raw",
        x,
        &[LayerSpec::conv(2, 8, KERNEL), relu(), pool(2), LayerSpec::conv(8, 16, KERNEL), relu(), pool(2)],
    )?;
    let amp = head(&mut b, "amp", raw)?;
    b.output(amp)?;
    b.output(freq)?;
    b.output(phase)?;
    Ok(b.build()?)
}

/// Parameter count of one block for 64-sample frames.
pub const BLOCK_PARAMS_N64: usize = 13_747;

#[cfg(test)]
mod tests {
    use super::*;
    use qsine_nn::Tensor;

    #[test]
    fn block_shape_and_size() {
        let net = block_network::<f32>(64, 0).unwrap();
        assert_eq!(net.param_count(), BLOCK_PARAMS_N64);
        let y = net.infer(&[Tensor::zeros(&[3, 64, 2])]).unwrap();
        assert_eq!(y.len(), 3);
        assert!(y.iter().all(|t| t.shape() == [3, 1]));
    }

    #[test]
    fn detection_shapes() {
        let net = detection_network::<f32>(64, 5, 0, 1).unwrap();
        let flat = net.value_id("g12").unwrap();
        assert_eq!(net.value_shape(flat).unwrap(), &[512]);
        let y = net.infer(&[Tensor::filled(&[2, 64, 2], 0.3)]).unwrap();
        assert_eq!(y[0].shape(), &[2, 5]);
        for row in y[0].data().chunks(5) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
        assert!(detection_network::<f32>(60, 5, 0, 1).is_err());
    }
}
