//! Property tests: the homomorphism contract on both backends, packing
//! linearity, and bit-exact serialization round trips.

use std::sync::Arc;

use proptest::prelude::*;

use enshroud::io::{read_ciphertext, write_ciphertext, write_packed_matrix};
use enshroud::packing::{pack_columns, unpack};
use enshroud::{BackendKind, Engine, HeParams, KeyMaterial};

fn engine(backend: BackendKind) -> Engine {
    let params = match backend {
        BackendKind::Clear => HeParams::new(1 << 6, 6, 2, 40).with_seed(71),
        BackendKind::Ckks => HeParams::new(1 << 6, 6, 2, 40).with_seed(71),
    };
    Engine::new(Arc::new(
        KeyMaterial::generate(&params, backend, true).unwrap(),
    ))
    .unwrap()
}

fn slot_vec() -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-1.0f64..1.0, 32)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    // decrypt(f(ct..)) equals the slotwise plaintext operation within
    // n_ops * backend_eps for f in {add, sub, mult, pmult, rotate}.
    #[test]
    fn homomorphism_contract(va in slot_vec(), vb in slot_vec(), k in 0i64..32) {
        for backend in [BackendKind::Clear, BackendKind::Ckks] {
            let e = engine(backend);
            let eps = e.params().backend_eps;
            let ca = e.encrypt(&e.encode_default(&va).unwrap()).unwrap();
            let cb = e.encrypt(&e.encode_default(&vb).unwrap()).unwrap();

            let sum = e.decrypt(&e.add(&ca, &cb).unwrap()).unwrap();
            let diff = e.decrypt(&e.sub(&ca, &cb).unwrap()).unwrap();
            let prod = e.decrypt(&e.mult(&ca, &cb).unwrap()).unwrap();
            let pt = e.encode_default(&vb).unwrap();
            let pprod = e.decrypt(&e.pmult(&ca, &pt).unwrap()).unwrap();
            let rot = e.decrypt(&e.rotate(&ca, k).unwrap()).unwrap();

            for i in 0..32 {
                prop_assert!((sum[i] - (va[i] + vb[i])).abs() <= 2.0 * eps);
                prop_assert!((diff[i] - (va[i] - vb[i])).abs() <= 2.0 * eps);
                prop_assert!((prod[i] - va[i] * vb[i]).abs() <= 2.0 * eps);
                prop_assert!((pprod[i] - va[i] * vb[i]).abs() <= 2.0 * eps);
                let want = va[(i + k as usize) % 32];
                prop_assert!((rot[i] - want).abs() <= 2.0 * eps);
            }
        }
    }

    // pack(X + Y) decrypts equal to pack(X) + pack(Y), columnwise.
    #[test]
    fn packing_linearity(x in proptest::collection::vec(-1.0f64..1.0, 12),
                         y in proptest::collection::vec(-1.0f64..1.0, 12)) {
        for backend in [BackendKind::Clear, BackendKind::Ckks] {
            let e = engine(backend);
            let eps = e.params().backend_eps;
            let sum: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
            let px = pack_columns(&e, &x, 4, 3).unwrap();
            let py = pack_columns(&e, &y, 4, 3).unwrap();
            let want = unpack(&e, &pack_columns(&e, &sum, 4, 3).unwrap()).unwrap();
            let mut got = vec![0.0; 12];
            for j in 0..3 {
                let col = e.decrypt(&e.add(&px.cols[j], &py.cols[j]).unwrap()).unwrap();
                for i in 0..4 {
                    got[i * 3 + j] = col[i];
                }
            }
            for (a, b) in got.iter().zip(&want) {
                prop_assert!((a - b).abs() <= 2.0 * eps);
            }
        }
    }

    // Serialized ciphertexts and matrices survive a round trip bit-exactly.
    #[test]
    fn serialization_roundtrips_bit_exact(v in slot_vec()) {
        for backend in [BackendKind::Clear, BackendKind::Ckks] {
            let e = engine(backend);
            let ct = e.encrypt(&e.encode_default(&v).unwrap()).unwrap();
            let bytes = write_ciphertext(&ct);
            let back = read_ciphertext(&bytes).unwrap();
            prop_assert_eq!(write_ciphertext(&back), bytes);

            let pm = pack_columns(&e, &v[..8], 4, 2).unwrap();
            let mbytes = write_packed_matrix(&pm);
            let mback = enshroud::io::read_packed_matrix(&mbytes).unwrap();
            prop_assert_eq!(write_packed_matrix(&mback), mbytes);
        }
    }
}
