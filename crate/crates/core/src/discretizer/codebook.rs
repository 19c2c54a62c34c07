use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::signal::FeatureFingerprint;

const MAGIC: &str = "UNITCB1";

/// `J` centroids in feature space plus the extractor configuration that
/// produced them.
///
/// Centroids are held at `f32` precision so the on-disk form is lossless.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    centroids: Array2<f64>,
    features: FeatureFingerprint,
}

impl Codebook {
    pub fn new(centroids: Array2<f64>, features: FeatureFingerprint) -> Result<Self> {
        let (j, d) = centroids.dim();
        if j < 2 {
            return Err(Error::InvalidCodebook(format!("need at least 2 centroids, got {j}")));
        }
        if d != features.dim {
            return Err(Error::DimensionMismatch {
                expected: features.dim,
                found: d,
            });
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidCodebook("non-finite centroid".into()));
        }
        let centroids = centroids.mapv(|v| v as f32 as f64);
        Ok(Self {
            centroids,
            features,
        })
    }

    pub fn size(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }

    pub fn centroids(&self) -> &Array2<f64> {
        &self.centroids
    }

    pub fn centroid(&self, j: usize) -> ndarray::ArrayView1<'_, f64> {
        self.centroids.row(j)
    }

    pub fn features(&self) -> &FeatureFingerprint {
        &self.features
    }

    pub fn frame_hop(&self) -> usize {
        self.features.frame_hop()
    }

    /// Index pair of the first two identical centroids, if any.
    pub fn duplicate_pair(&self) -> Option<(usize, usize)> {
        let j = self.size();
        for a in 0..j {
            for b in a + 1..j {
                if self.centroids.row(a) == self.centroids.row(b) {
                    return Some((a, b));
                }
            }
        }
        None
    }

    fn header(&self) -> String {
        format!(
            "{MAGIC} {} {} {} {} {}\n",
            self.size(),
            self.dim(),
            self.features.hop,
            self.features.downsample,
            self.features.sample_rate
        )
    }

    /// Content hash (first 16 hex digits of SHA-256 over the serialized form).
    pub fn id(&self) -> String {
        let mut bytes = Vec::new();
        self.write_to(&mut bytes).expect("writing to memory");
        let digest = Sha256::digest(&bytes);
        hex::encode(&digest[..8])
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(self.header().as_bytes())?;
        for &v in self.centroids.iter() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        w.flush()
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        r.read_line(&mut line)?;
        let fields: Vec<&str> = line.trim_end().split(' ').collect();
        if fields.len() != 6 || fields[0] != MAGIC {
            return Err(Error::InvalidCodebook(format!("bad header `{}`", line.trim_end())));
        }
        let num = |i: usize| -> Result<usize> {
            fields[i]
                .parse()
                .map_err(|_| Error::InvalidCodebook(format!("bad header field `{}`", fields[i])))
        };
        let (j, d, hop, downsample, rate) = (num(1)?, num(2)?, num(3)?, num(4)?, num(5)?);
        let mut data = Vec::with_capacity(j * d);
        let mut buf = [0u8; 4];
        for _ in 0..j * d {
            r.read_exact(&mut buf)
                .map_err(|_| Error::InvalidCodebook("truncated centroid data".into()))?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        let centroids = Array2::from_shape_vec((j, d), data)
            .map_err(|e| Error::InvalidCodebook(e.to_string()))?;
        Self::new(
            centroids,
            FeatureFingerprint {
                hop,
                downsample,
                dim: d,
                sample_rate: rate as u32,
            },
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(File::open(path)?)
    }
}
