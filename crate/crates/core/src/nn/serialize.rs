//! Model checkpoint format: a text header describing the architecture and
//! label-normalization bounds, a `---` separator, then every parameter and
//! batch-norm running statistic as little-endian f64 in the model's declared
//! visit order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::model::{Architecture, LabelNormalizer, Model, OutputActivation};

const MODEL_MAGIC: &str = "NFMODEL v1";

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Serialize a model. The byte stream is a pure function of the model state.
pub fn write_model_to<W: Write>(model: &mut Model, w: &mut W) -> Result<()> {
    let arch = model.arch.clone();
    let norm = model.normalizer.clone();
    writeln!(w, "{MODEL_MAGIC}")?;
    writeln!(w, "input_size {}", arch.input_size)?;
    writeln!(w, "num_sources {}", arch.num_sources)?;
    writeln!(
        w,
        "conv_channels {} {} {} {}",
        arch.conv_channels[0], arch.conv_channels[1], arch.conv_channels[2], arch.conv_channels[3]
    )?;
    writeln!(
        w,
        "fc_sizes {} {} {}",
        arch.fc_sizes[0], arch.fc_sizes[1], arch.fc_sizes[2]
    )?;
    writeln!(w, "dropout_rate {}", fmt_f64(arch.dropout_rate))?;
    let act = match arch.output_activation {
        OutputActivation::Linear => "linear",
        OutputActivation::Softmax => "softmax",
    };
    writeln!(w, "output_activation {act}")?;
    writeln!(w, "pool_target {}", arch.pool_target)?;
    writeln!(
        w,
        "label_lo {} {} {}",
        fmt_f64(norm.lo[0]),
        fmt_f64(norm.lo[1]),
        fmt_f64(norm.lo[2])
    )?;
    writeln!(
        w,
        "label_hi {} {} {}",
        fmt_f64(norm.hi[0]),
        fmt_f64(norm.hi[1]),
        fmt_f64(norm.hi[2])
    )?;
    writeln!(w, "state_len {}", model.state_len())?;
    writeln!(w, "---")?;
    let mut io_err: Option<std::io::Error> = None;
    model.visit_params(&mut |p| {
        if io_err.is_some() {
            return;
        }
        for v in p.data.iter() {
            if let Err(e) = w.write_all(&v.to_le_bytes()) {
                io_err = Some(e);
                return;
            }
        }
    });
    match io_err {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

pub fn write_model(model: &mut Model, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model_to(model, &mut w)?;
    w.flush()?;
    Ok(())
}

struct HeaderReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> HeaderReader<R> {
    fn read_line(&mut self) -> Result<String> {
        let mut line = Vec::new();
        let mut byte = [0u8; 1];
        loop {
            if self.inner.read(&mut byte)? == 0 {
                return Err(Error::Format {
                    offset: self.offset,
                    message: "unexpected end of file in model header".into(),
                });
            }
            self.offset += 1;
            if byte[0] == b'\n' {
                break;
            }
            line.push(byte[0]);
        }
        String::from_utf8(line).map_err(|_| Error::Format {
            offset: self.offset,
            message: "model header is not valid UTF-8".into(),
        })
    }

    fn field(&mut self, key: &str) -> Result<String> {
        let line = self.read_line()?;
        line.strip_prefix(key)
            .and_then(|rest| rest.strip_prefix(' '))
            .map(str::to_owned)
            .ok_or_else(|| Error::Format {
                offset: self.offset,
                message: format!("expected model header key '{key}', got '{line}'"),
            })
    }

    fn parse<T: std::str::FromStr>(&self, s: &str, what: &str) -> Result<T> {
        s.trim().parse().map_err(|_| Error::Format {
            offset: self.offset,
            message: format!("cannot parse {what} from '{s}'"),
        })
    }

    fn parse_list<T: std::str::FromStr + Copy + Default, const K: usize>(
        &self,
        s: &str,
        what: &str,
    ) -> Result<[T; K]> {
        let parts: Vec<&str> = s.split_whitespace().collect();
        if parts.len() != K {
            return Err(Error::Format {
                offset: self.offset,
                message: format!("{what}: expected {K} values, got {}", parts.len()),
            });
        }
        let mut out = [T::default(); K];
        for (o, p) in out.iter_mut().zip(parts) {
            *o = self.parse(p, what)?;
        }
        Ok(out)
    }
}

pub fn read_model_from<R: Read>(r: R) -> Result<Model> {
    let mut r = HeaderReader { inner: r, offset: 0 };
    let magic = r.read_line()?;
    if magic != MODEL_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic '{magic}', expected '{MODEL_MAGIC}'"),
        });
    }
    let input_size: usize = {
        let s = r.field("input_size")?;
        r.parse(&s, "input_size")?
    };
    let num_sources: usize = {
        let s = r.field("num_sources")?;
        r.parse(&s, "num_sources")?
    };
    let conv_channels: [usize; 4] = {
        let s = r.field("conv_channels")?;
        r.parse_list(&s, "conv_channels")?
    };
    let fc_sizes: [usize; 3] = {
        let s = r.field("fc_sizes")?;
        r.parse_list(&s, "fc_sizes")?
    };
    let dropout_rate: f64 = {
        let s = r.field("dropout_rate")?;
        r.parse(&s, "dropout_rate")?
    };
    let output_activation = match r.field("output_activation")?.trim() {
        "linear" => OutputActivation::Linear,
        "softmax" => OutputActivation::Softmax,
        other => {
            return Err(Error::Format {
                offset: r.offset,
                message: format!("unknown output activation '{other}'"),
            })
        }
    };
    let pool_target: usize = {
        let s = r.field("pool_target")?;
        r.parse(&s, "pool_target")?
    };
    let lo: [f64; 3] = {
        let s = r.field("label_lo")?;
        r.parse_list(&s, "label_lo")?
    };
    let hi: [f64; 3] = {
        let s = r.field("label_hi")?;
        r.parse_list(&s, "label_hi")?
    };
    let state_len: usize = {
        let s = r.field("state_len")?;
        r.parse(&s, "state_len")?
    };
    let sep = r.read_line()?;
    if sep != "---" {
        return Err(Error::Format {
            offset: r.offset,
            message: format!("expected header terminator '---', got '{sep}'"),
        });
    }
    let arch = Architecture {
        input_size,
        num_sources,
        conv_channels,
        fc_sizes,
        dropout_rate,
        output_activation,
        pool_target,
    };
    let normalizer = LabelNormalizer::new(lo, hi).map_err(|e| Error::Format {
        offset: r.offset,
        message: format!("invalid label bounds: {e}"),
    })?;
    let mut model = Model::new(arch, normalizer, 0).map_err(|e| Error::Format {
        offset: r.offset,
        message: format!("invalid architecture: {e}"),
    })?;
    if model.state_len() != state_len {
        return Err(Error::Format {
            offset: r.offset,
            message: format!(
                "state_len {state_len} does not match architecture ({} expected)",
                model.state_len()
            ),
        });
    }
    let mut payload = vec![0u8; state_len * 8];
    let header_end = r.offset;
    let mut read_total = 0usize;
    while read_total < payload.len() {
        match r.inner.read(&mut payload[read_total..]) {
            Ok(0) => {
                return Err(Error::Format {
                    offset: header_end + read_total as u64,
                    message: format!(
                        "truncated payload: expected {} bytes, got {read_total}",
                        payload.len()
                    ),
                })
            }
            Ok(n) => read_total += n,
            Err(e) => return Err(e.into()),
        }
    }
    // trailing bytes are a corruption signal, not slack
    let mut extra = [0u8; 1];
    if r.inner.read(&mut extra)? != 0 {
        return Err(Error::Format {
            offset: header_end + payload.len() as u64,
            message: "trailing bytes after model payload".into(),
        });
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let mut cursor = 0;
    model.visit_params(&mut |p| {
        let len = p.data.len();
        p.data.copy_from_slice(&values[cursor..cursor + len]);
        cursor += len;
    });
    debug_assert_eq!(cursor, state_len);
    Ok(model)
}

pub fn read_model(path: &Path) -> Result<Model> {
    read_model_from(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::Mode;
    use crate::rng::rng_from_seed;
    use crate::tensor::Tensor;

    fn sample_model() -> Model {
        let mut model = Model::new(
            Architecture::desk(6, 2),
            LabelNormalizer::new([-1.0, -2.0, 0.5], [1.0, 2.0, 3.5]).unwrap(),
            77,
        )
        .unwrap();
        // push the running stats away from their initialization so the
        // round trip exercises them too
        let mut rng = rng_from_seed(1);
        let input = Tensor::from_vec(
            &[2, 2, 6, 6],
            (0..144).map(|i| (i as f64 * 0.37).sin()).collect(),
        )
        .unwrap();
        model.forward(&input, Mode::Train, &mut rng).unwrap();
        model
    }

    fn state(model: &mut Model) -> Vec<f64> {
        let mut out = Vec::new();
        model.visit_params(&mut |p| out.extend_from_slice(p.data));
        out
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut model = sample_model();
        let mut buf = Vec::new();
        write_model_to(&mut model, &mut buf).unwrap();
        let mut back = read_model_from(buf.as_slice()).unwrap();
        assert_eq!(back.arch, model.arch);
        assert_eq!(back.normalizer, model.normalizer);
        assert_eq!(state(&mut back), state(&mut model));
        let mut buf2 = Vec::new();
        write_model_to(&mut back, &mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn round_trip_preserves_inference() {
        let mut model = sample_model();
        let mut buf = Vec::new();
        write_model_to(&mut model, &mut buf).unwrap();
        let mut back = read_model_from(buf.as_slice()).unwrap();
        let input = Tensor::from_vec(
            &[1, 2, 6, 6],
            (0..72).map(|i| (i as f64 * 0.11).cos()).collect(),
        )
        .unwrap();
        let mut rng_a = rng_from_seed(0);
        let mut rng_b = rng_from_seed(0);
        let ya = model.forward(&input, Mode::Infer, &mut rng_a).unwrap();
        let yb = back.forward(&input, Mode::Infer, &mut rng_b).unwrap();
        assert_eq!(ya.data, yb.data);
    }

    #[test]
    fn truncation_reports_offset() {
        let mut model = sample_model();
        let mut buf = Vec::new();
        write_model_to(&mut model, &mut buf).unwrap();
        buf.truncate(buf.len() - 4);
        match read_model_from(buf.as_slice()) {
            Err(Error::Format { offset, message }) => {
                assert!(message.contains("truncated"), "message: {message}");
                assert!(offset > 0);
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut model = sample_model();
        let mut buf = Vec::new();
        write_model_to(&mut model, &mut buf).unwrap();
        buf.push(0);
        assert!(matches!(
            read_model_from(buf.as_slice()),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn header_corruption_rejected() {
        let mut model = sample_model();
        let mut buf = Vec::new();
        write_model_to(&mut model, &mut buf).unwrap();
        // damage the magic
        buf[0] = b'X';
        assert!(matches!(
            read_model_from(buf.as_slice()),
            Err(Error::Format { offset: 0, .. })
        ));
        // inconsistent state_len
        let text = String::from_utf8(buf.clone()[..200].to_vec());
        drop(text);
        let mut s = buf.clone();
        let pos = s
            .windows(10)
            .position(|w| w == b"state_len ")
            .unwrap();
        s[pos + 10] = b'9';
        assert!(matches!(
            read_model_from(s.as_slice()),
            Err(Error::Format { .. })
        ));
    }
}
