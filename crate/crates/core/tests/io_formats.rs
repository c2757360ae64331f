use curvseg::embednet::ModelParams;
use curvseg::io::{
    decode_pgm, decode_ppm, encode_pgm, encode_ppm, instances_from_container, instances_to_container,
    params_from_container, params_to_container, read_file, write_atomic, TensorContainer,
};
use curvseg::synthgen::{generate_scene, SceneSpec};
use curvseg::{Error, ImageGrid};
use proptest::prelude::*;

fn entry_strategy() -> impl Strategy<Value = (Vec<u32>, Vec<f32>)> {
    prop::collection::vec(0u32..4, 0..4).prop_flat_map(|dims| {
        let n: usize = dims.iter().map(|&d| d as usize).product();
        (Just(dims), prop::collection::vec(any::<f32>(), n))
    })
}

proptest! {
    #[test]
    fn container_round_trip_is_byte_preserving(entries in prop::collection::vec(entry_strategy(), 0..5)) {
        let mut c = TensorContainer::new();
        for (i, (dims, data)) in entries.into_iter().enumerate() {
            c.push(format!("t{i}"), dims, data).unwrap();
        }
        let bytes = c.encode();
        let back = TensorContainer::decode(&bytes).unwrap();
        prop_assert_eq!(back.encode(), bytes);
        for (a, b) in c.entries().iter().zip(back.entries()) {
            prop_assert_eq!(&a.name, &b.name);
            prop_assert_eq!(&a.dims, &b.dims);
            prop_assert_eq!(
                a.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn truncated_containers_are_rejected(cut in 1usize..40) {
        let mut c = TensorContainer::new();
        c.push("a", vec![2, 3], vec![1.0; 6]).unwrap();
        let bytes = c.encode();
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(matches!(TensorContainer::decode(&bytes[..keep]), Err(Error::Parse(_))));
    }
}

#[test]
fn container_header_layout() {
    let mut c = TensorContainer::new();
    c.push("ab", vec![1], vec![0.5]).unwrap();
    let b = c.encode();
    assert_eq!(&b[..4], b"SEGT");
    assert_eq!(b[4], 1);
    assert_eq!(&b[5..9], &1u32.to_le_bytes());
    assert_eq!(&b[9..11], &2u16.to_le_bytes());
    assert_eq!(&b[11..13], b"ab");
    assert_eq!(b[13], 1);
    assert_eq!(&b[14..18], &1u32.to_le_bytes());
    assert_eq!(&b[18..22], &0.5f32.to_le_bytes());
    assert_eq!(b.len(), 22);
}

#[test]
fn instance_sets_round_trip() {
    let s = generate_scene(&SceneSpec {
        instance_count: [3, 3],
        force_crossing: true,
        rng_seed: 4,
        ..SceneSpec::default()
    })
    .unwrap();
    let bytes = instances_to_container(&s.instances).encode();
    let back = instances_from_container(&TensorContainer::decode(&bytes).unwrap()).unwrap();
    assert_eq!(back, s.instances);
}

#[test]
fn params_round_trip_at_f32_precision() {
    let p = ModelParams::init(9);
    let back = params_from_container(&params_to_container(&p)).unwrap();
    for (a, b) in p.to_flat().iter().zip(back.to_flat()) {
        assert_eq!(*a as f32, b as f32);
    }
    let mut missing = TensorContainer::new();
    missing.push("trunk.conv1.weight", vec![16, 1, 3, 3], vec![0.0; 144]).unwrap();
    assert!(matches!(params_from_container(&missing), Err(Error::Config(_))));
}

#[test]
fn images_round_trip_through_netpbm() {
    let img = ImageGrid::new(3, 5, (0..15).map(|i| i as f64 / 14.0).collect()).unwrap();
    let back = decode_pgm(&encode_pgm(&img)).unwrap();
    assert_eq!(back.dims(), (3, 5));
    for (a, b) in img.values().iter().zip(back.values()) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
    }
    assert_eq!(encode_pgm(&back), encode_pgm(&img));
    let rgb = vec![[1, 2, 3], [4, 5, 6]];
    assert_eq!(decode_ppm(&encode_ppm(2, 1, &rgb).unwrap()).unwrap(), (2, 1, rgb));
}

#[test]
fn atomic_writes_and_io_errors_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.bin");
    write_atomic(&path, b"one").unwrap();
    write_atomic(&path, b"two").unwrap();
    assert_eq!(read_file(&path).unwrap(), b"two");
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    let missing = dir.path().join("nope").join("y.bin");
    let err = write_atomic(&missing, b"z").unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert!(err.to_string().contains("nope"));
}
