//! The checkpoint layout read back by a second, independent parser.

use ulast::checkpoint::{read_checkpoint, save_checkpoint, Checkpoint};
use ulast::Error;
use ulast_core::net::{Model, NetConfig};

struct Parsed {
    version: u32,
    params: Vec<(String, Vec<usize>, Vec<f32>)>,
    step: u64,
    config: String,
}

/// Byte-level reader written against the documented layout only.
fn parse(b: &[u8]) -> Parsed {
    let mut pos = 0;
    let mut take = |n: usize| {
        let s = &b[pos..pos + n];
        pos += n;
        s
    };
    assert_eq!(take(4), b"ULST");
    let version = u32::from_le_bytes(take(4).try_into().unwrap());
    let count = u32::from_le_bytes(take(4).try_into().unwrap());
    let mut params = Vec::new();
    for _ in 0..count {
        let nlen = u16::from_le_bytes(take(2).try_into().unwrap()) as usize;
        let name = String::from_utf8(take(nlen).to_vec()).unwrap();
        let rank = take(1)[0] as usize;
        let dims: Vec<usize> = (0..rank).map(|_| u32::from_le_bytes(take(4).try_into().unwrap()) as usize).collect();
        let n: usize = dims.iter().product();
        let values = (0..n).map(|_| f32::from_le_bytes(take(4).try_into().unwrap())).collect();
        params.push((name, dims, values));
    }
    let step = u64::from_le_bytes(take(8).try_into().unwrap());
    let clen = u32::from_le_bytes(take(4).try_into().unwrap()) as usize;
    let config = String::from_utf8(take(clen).to_vec()).unwrap();
    assert_eq!(pos, b.len());
    Parsed { version, params, step, config }
}

fn small_model(seed: u64) -> Model {
    Model::new(NetConfig { channels: 4, ..NetConfig::default() }, seed).unwrap()
}

#[test]
fn second_reader_agrees_with_model() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ulst");
    let model = small_model(5);
    save_checkpoint(&model, 42, "{\"seed\":5}".into(), &path).unwrap();
    let p = parse(&std::fs::read(&path).unwrap());
    assert_eq!((p.version, p.step, p.config.as_str()), (1, 42, "{\"seed\":5}"));
    assert_eq!(p.params.len(), model.params.len());
    for ((name, dims, values), q) in p.params.iter().zip(model.params.iter()) {
        assert_eq!(name, &q.name);
        assert_eq!(dims.as_slice(), q.tensor.shape());
        for (a, b) in values.iter().zip(q.tensor.data()) {
            assert_eq!(a.to_bits(), (*b as f32).to_bits());
        }
    }
}

#[test]
fn load_restores_every_parameter_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ulst");
    let src = small_model(1);
    save_checkpoint(&src, 0, String::new(), &path).unwrap();
    let mut dst = small_model(2);
    ulast::checkpoint::load_checkpoint(&mut dst, &path).unwrap();
    for (a, b) in src.params.iter().zip(dst.params.iter()) {
        let a32: Vec<u32> = a.tensor.data().iter().map(|v| (*v as f32).to_bits()).collect();
        let b32: Vec<u32> = b.tensor.data().iter().map(|v| (*v as f32).to_bits()).collect();
        assert_eq!(a32, b32, "{}", a.name);
        // loaded values are exactly representable at 32 bits
        assert!(b.tensor.data().iter().all(|v| (*v as f32) as f64 == *v));
    }
    // saving the loaded model reproduces the file byte for byte
    let again = dir.path().join("again.ulst");
    save_checkpoint(&dst, 0, String::new(), &again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn damaged_files_report_offsets() {
    let bytes = Checkpoint::from_model(&small_model(0), 7, String::new()).unwrap().to_bytes();
    for cut in [0, 3, 11, 20, bytes.len() / 2, bytes.len() - 1] {
        match Checkpoint::from_bytes(&bytes[..cut]) {
            Err(Error::Format { offset, .. }) => assert!(offset <= cut),
            other => panic!("cut at {cut}: {other:?}"),
        }
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format { offset: 4, .. })));
    let mut long = bytes;
    long.push(0);
    assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::Format { .. })));
}

#[test]
fn foreign_parameters_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ulst");
    save_checkpoint(&small_model(0), 0, String::new(), &path).unwrap();
    let mut ck = read_checkpoint(&path).unwrap();
    ck.params[0].name = "encoder.mystery".into();
    assert!(matches!(ck.apply_to(&mut small_model(0)), Err(Error::Checkpoint(_))));
    let ck = read_checkpoint(&path).unwrap();
    let mut wider = Model::new(NetConfig { channels: 8, ..NetConfig::default() }, 0).unwrap();
    assert!(matches!(ck.apply_to(&mut wider), Err(Error::Checkpoint(_))));
}
