//! NPY v1.0 array files (little-endian, C order), via `ndarray-npy`.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use ndarray::{Array, Dimension};
use ndarray_npy::{ReadNpyExt, ReadableElement, WritableElement, WriteNpyExt};

use crate::error::{Error, Result};

pub fn read<A, D>(path: &Path) -> Result<Array<A, D>>
where
    A: ReadableElement,
    D: Dimension,
{
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Array::<A, D>::read_npy(std::io::BufReader::new(file)).map_err(|e| Error::Npy {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn write<A, D>(path: &Path, array: &Array<A, D>) -> Result<()>
where
    A: WritableElement,
    D: Dimension,
{
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    array
        .write_npy(BufWriter::new(file))
        .map_err(|e| Error::Npy {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn header_is_v1_little_endian() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.npy");
        write(&path, &array![[1.0f32, 2.0], [3.0, 4.0]]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..6], b"\x93NUMPY");
        assert_eq!(bytes[6], 1);
        let header = String::from_utf8_lossy(&bytes[10..]);
        assert!(header.contains("'descr': '<f4'"));
        assert!(header.contains("'shape': (2, 2)"));
        let back: Array2<f32> = read(&path).unwrap();
        assert_eq!(back, array![[1.0f32, 2.0], [3.0, 4.0]]);
    }

    #[test]
    fn missing_file_reports_path() {
        let err = read::<f32, ndarray::Ix2>(Path::new("/nonexistent/x.npy")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.npy"));
    }
}
