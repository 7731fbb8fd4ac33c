//! Binary checkpoints.
//!
//! Layout: magic `SGNT`, format version (u32 LE), manifest length (u32 LE),
//! UTF-8 manifest, value count (u64 LE), then every parameter and running
//! statistic as little-endian `f32` in manifest order. Manifest lines:
//!
//! ```text
//! input <name> <dim,dim,...>
//! node <name> <parent-id> <layer spec>
//! output <value-id>
//! tensor <node-name> <index> <dim,dim,...>
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{NnError, Result};
use crate::layer::{Layer, LayerSpec};
use crate::network::{InputSpec, Network, Node};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SGNT";
pub const VERSION: u32 = 1;

fn dims(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_dims(s: &str) -> Result<Vec<usize>> {
    if s == "-" {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|d| d.parse().map_err(|_| NnError::Format(format!("bad dimension list '{s}'"))))
        .collect()
}

fn persistent<T: Scalar>(layer: &Layer<T>) -> Vec<&Tensor<T>> {
    let mut v: Vec<&Tensor<T>> = layer.params().into_iter().map(|p| &p.value).collect();
    v.extend(layer.state());
    v
}

pub fn to_bytes<T: Scalar>(net: &Network<T>) -> Vec<u8> {
    let mut manifest = String::new();
    for i in &net.inputs {
        let d = if i.shape.is_empty() { "-".to_string() } else { dims(&i.shape) };
        manifest.push_str(&format!("input {} {d}\n", i.name));
    }
    for n in &net.nodes {
        manifest.push_str(&format!("node {} {} {}\n", n.name, n.parent, n.layer.spec()));
    }
    for o in &net.outputs {
        manifest.push_str(&format!("output {o}\n"));
    }
    let mut values: Vec<f32> = Vec::new();
    for n in &net.nodes {
        for (k, t) in persistent(&n.layer).into_iter().enumerate() {
            manifest.push_str(&format!("tensor {} {k} {}\n", n.name, dims(t.shape())));
            values.extend(t.data().iter().map(|v| v.as_f64() as f32));
        }
    }
    let mut out = Vec::with_capacity(16 + manifest.len() + 4 * values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| NnError::Format("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn from_bytes<T: Scalar>(buf: &[u8]) -> Result<Network<T>> {
    let fmt = |m: String| NnError::Format(m);
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(fmt("missing SGNT magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(fmt(format!("unsupported checkpoint version {version}")));
    }
    let mlen = r.u32()? as usize;
    let manifest =
        std::str::from_utf8(r.take(mlen)?).map_err(|_| fmt("manifest is not UTF-8".into()))?.to_string();
    let count = r.u64()? as usize;
    let raw = r.take(count.checked_mul(4).ok_or_else(|| fmt("value count overflow".into()))?)?;
    if r.pos != buf.len() {
        return Err(fmt("trailing bytes after checkpoint".into()));
    }
    let values: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();

    let mut inputs = Vec::new();
    let mut nodes: Vec<Node<T>> = Vec::new();
    let mut outputs = Vec::new();
    let mut tensors: Vec<(String, usize, Vec<usize>)> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for line in manifest.lines() {
        let bad = || fmt(format!("bad manifest line '{line}'"));
        let mut parts = line.splitn(4, ' ');
        match parts.next() {
            Some("input") => {
                let name = parts.next().ok_or_else(bad)?.to_string();
                let shape = parse_dims(parts.next().ok_or_else(bad)?)?;
                inputs.push(InputSpec { name, shape });
            }
            Some("node") => {
                let name = parts.next().ok_or_else(bad)?.to_string();
                let parent: usize = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
                let spec: LayerSpec = parts.next().ok_or_else(bad)?.parse()?;
                let in_shape = if parent < inputs.len() {
                    inputs[parent].shape.clone()
                } else {
                    nodes.get(parent - inputs.len()).ok_or_else(bad)?.shape.clone()
                };
                let shape = spec.output_shape(&in_shape)?;
                nodes.push(Node { name, parent, layer: Layer::init(spec, &mut rng), shape });
            }
            Some("output") => {
                let o: usize = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
                if o >= inputs.len() + nodes.len() {
                    return Err(bad());
                }
                outputs.push(o);
            }
            Some("tensor") => {
                let name = parts.next().ok_or_else(bad)?.to_string();
                let k: usize = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
                tensors.push((name, k, parse_dims(parts.next().ok_or_else(bad)?)?));
            }
            _ => return Err(bad()),
        }
    }

    let mut net = Network::from_parts(inputs, nodes, outputs);
    let mut offset = 0usize;
    let mut ti = tensors.iter();
    for node in &mut net.nodes {
        let slots = node.layer.persistent_mut();
        for (k, slot) in slots.into_iter().enumerate() {
            let (name, idx, shape) = ti.next().ok_or_else(|| fmt("manifest lists too few tensors".into()))?;
            if *name != node.name || *idx != k || shape.as_slice() != slot.shape() {
                return Err(fmt(format!("tensor entry {name}/{idx} {shape:?} does not match node '{}'", node.name)));
            }
            let n = slot.len();
            let chunk = values.get(offset..offset + n).ok_or_else(|| fmt("value section too short".into()))?;
            slot.data_mut().iter_mut().zip(chunk).for_each(|(d, &v)| *d = T::of(v as f64));
            offset += n;
        }
    }
    if ti.next().is_some() || offset != values.len() {
        return Err(fmt("manifest and value section disagree".into()));
    }
    Ok(net)
}

pub fn save<T: Scalar>(net: &Network<T>, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(net))?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<Network<T>> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::Activation;
    use crate::network::{Mode, NetworkBuilder};

    fn sample_net() -> Network<f32> {
        let mut b = NetworkBuilder::<f32>::new(7);
        let x = b.input("frame", &[16, 2]).unwrap();
        let c = b.add("conv", x, LayerSpec::conv(2, 4, 3)).unwrap();
        let n = b.add("bn", c, LayerSpec::batch_norm(4)).unwrap();
        let f = b.add("flat", n, LayerSpec::Flatten).unwrap();
        let d = b.add("drop", f, LayerSpec::Dropout { rate: 0.5, seed: 11 }).unwrap();
        let o = b.add("out", d, LayerSpec::dense(64, 3)).unwrap();
        let s = b.add("soft", o, LayerSpec::Activation(Activation::Softmax)).unwrap();
        b.output(s).unwrap();
        b.output(c).unwrap();
        b.build().unwrap()
    }

    fn frame() -> Tensor<f32> {
        Tensor::from_f64(&[4, 16, 2], &(0..128).map(|i| (i as f64 * 0.21).cos()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn round_trip_preserves_inference() {
        let mut net = sample_net();
        net.forward(&[frame()]).unwrap(); // moves the running statistics
        net.set_mode(Mode::Infer);
        let bytes = to_bytes(&net);
        assert_eq!(&bytes[..4], b"SGNT");
        let back: Network<f32> = from_bytes(&bytes).unwrap();
        assert_eq!(back.infer(&[frame()]).unwrap(), net.infer(&[frame()]).unwrap());
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.sgnt");
        let net = sample_net();
        save(&net, &path).unwrap();
        let back: Network<f32> = load(&path).unwrap();
        assert_eq!(back.param_count(), net.param_count());
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = to_bytes(&sample_net());
        assert!(from_bytes::<f32>(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(from_bytes::<f32>(&wrong).is_err());
        let mut ver = bytes.clone();
        ver[4] = 9;
        assert!(from_bytes::<f32>(&ver).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(from_bytes::<f32>(&extra).is_err());
    }
}
