//! Fixed steganalysis residual filters: first, second and third order
//! differences in every direction, plus the SQUARE and EDGE families,
//! each embedded in a 5x5 support.

use std::sync::OnceLock;

use sha2::{Digest, Sha256};

/// Integer taps (row-major, 5x5) applied as `taps / divisor`.
#[derive(Clone, Copy, Debug)]
pub struct SrmKernel {
    pub name: &'static str,
    pub divisor: f64,
    pub taps: [i8; 25],
}

impl SrmKernel {
    pub fn weights(&self) -> [f64; 25] {
        self.taps.map(|t| t as f64 / self.divisor)
    }
}

/// SHA-256 of the bank in [`srm_bank_hash`] serialization.
pub const SRM_BANK_SHA256: &str = "e6a492135bdb3cb7763bf642cd277d9a253e6ec733307bf4e94b5aeaceed321f";

#[rustfmt::skip]
pub const SRM_KERNELS: [SrmKernel; 30] = [
    SrmKernel {
        name: "first_e",
        divisor: 1.0,
        taps: [
              0,   0,   0,   0,   0,
              0,   0,   0,   0,   0,
              0,   0,  -1,   1,   0,
              0,   0,   0,   0,   0,
              0,   0,   0,   0,   0,
        ],
    },
    SrmKernel {
        name: "first_w",
        divisor: 1.0,
        taps: [
              0,   0,   0,   0,   0,
              0,   0,   0,   0,   0,
              0,   1,  -1,   0,   0,
              0,   0,   0,   0,   0,
              0,   0,   0,   0,   0,
        ],
    },
    SrmKernel {
        name: "first_n",
        divisor: 1.0,
        taps: [
              0,   0,   0,   0,   0,
              0,   0,   1,   0,   0,
              0,   0,  -1,   0,   0,
              0,   0,   0,   0,   0,
              0,   0,   0,   0,   0,
        ],
    },
    SrmKernel {
        name: "first_s",
        divisor: 1.0,
        taps: [
              0,   0,   0,   0,   0,
              0,   0,   0,   0,   0,
              0,   0,  -1,   0,   0,
              0,   0,   1,   0,   0,
              0,   0,   0,   0,   0,
        ],
    },
    SrmKernel {
        name: "first_nw",
        divisor: 1.0,
        taps: [
              0,   0,   0,   0,   0,
              0,   1,   0,   0,   0,
              0,   0,  -1,   0,   0,
              0,   0,   0,   0,   0,
              0,   0,   0,   0,   0,
        ],
    },
    SrmKernel {
        name: "first_ne",
        divisor: 1.0,
        taps: [
              0,   0,   0,   0,   0,
              0,   0,   0,   1,   0,
              0,   0,  -1,   0,   0,
              0,   0,   0,   0,   0,
              0,   0,   0,   0,   0,
        ],
    },
    SrmKernel {
        name: "first_sw",
        divisor: 1.0,
        taps: [
              0,   0,   0,   0,   0,
              0,   0,   0,   0,   0,
              0,   0,  -1,   0,   0,
              0,   1,   0,   0,   0,
              0,   0,   0,   0,   0,
        ],
    },
    SrmKernel {
        name: "first_se",
        divisor: 1.0,
        taps: [
              0,   0,   0,   0,   0,
              0,   0,   0,   0,   0,
              0,   0,  -1,   0,   0,
              0,   0,   0,   1,   0,
              0,   0,   0,   0,   0,
        ],
    },
    SrmKernel {
        name: "second_h",
        divisor: 2.0,
        taps: [
              0,   0,   0,   0,   0,
              0,   0,   0,   0,   0,
              0,   1,  -2,   1,   0,
              0,   0,   0,   0,   0,
              0,   0,   0,   0,   0,
        ],
    },
    SrmKernel {
        name: "second_v",
        divisor: 2.0,
        taps: [
              0,   0,   0,   0,   0,
              0,   0,   1,   0,   0,
              0,   0,  -2,   0,   0,
              0,   0,   1,   0,   0,
              0,   0,   0,   0,   0,
        ],
    },
    SrmKernel {
        name: "second_d",
        divisor: 2.0,
        taps: [
              0,   0,   0,   0,   0,
              0,   1,   0,   0,   0,
              0,   0,  -2,   0,   0,
              0,   0,   0,   1,   0,
              0,   0,   0,   0,   0,
        ],
    },
    SrmKernel {
        name: "second_a",
        divisor: 2.0,
        taps: [
              0,   0,   0,   0,   0,
              0,   0,   0,   1,   0,
              0,   0,  -2,   0,   0,
              0,   1,   0,   0,   0,
              0,   0,   0,   0,   0,
        ],
    },
    SrmKernel {
        name: "third_e",
        divisor: 3.0,
        taps: [
              0,   0,   0,   0,   0,
              0,   0,   0,   0,   0,
              0,   1,  -3,   3,  -1,
              0,   0,   0,   0,   0,
              0,   0,   0,   0,   0,
        ],
    },
    SrmKernel {
        name: "third_w",
        divisor: 3.0,
        taps: [
              0,   0,   0,   0,   0,
              0,   0,   0,   0,   0,
             -1,   3,  -3,   1,   0,
              0,   0,   0,   0,   0,
              0,   0,   0,   0,   0,
        ],
    },
    SrmKernel {
        name: "third_n",
        divisor: 3.0,
        taps: [
              0,   0,  -1,   0,   0,
              0,   0,   3,   0,   0,
              0,   0,  -3,   0,   0,
              0,   0,   1,   0,   0,
              0,   0,   0,   0,   0,
        ],
    },
    SrmKernel {
        name: "third_s",
        divisor: 3.0,
        taps: [
              0,   0,   0,   0,   0,
              0,   0,   1,   0,   0,
              0,   0,  -3,   0,   0,
              0,   0,   3,   0,   0,
              0,   0,  -1,   0,   0,
        ],
    },
    SrmKernel {
        name: "third_nw",
        divisor: 3.0,
        taps: [
             -1,   0,   0,   0,   0,
              0,   3,   0,   0,   0,
              0,   0,  -3,   0,   0,
              0,   0,   0,   1,   0,
              0,   0,   0,   0,   0,
        ],
    },
    SrmKernel {
        name: "third_ne",
        divisor: 3.0,
        taps: [
              0,   0,   0,   0,  -1,
              0,   0,   0,   3,   0,
              0,   0,  -3,   0,   0,
              0,   1,   0,   0,   0,
              0,   0,   0,   0,   0,
        ],
    },
    SrmKernel {
        name: "third_sw",
        divisor: 3.0,
        taps: [
              0,   0,   0,   0,   0,
              0,   0,   0,   1,   0,
              0,   0,  -3,   0,   0,
              0,   3,   0,   0,   0,
             -1,   0,   0,   0,   0,
        ],
    },
    SrmKernel {
        name: "third_se",
        divisor: 3.0,
        taps: [
              0,   0,   0,   0,   0,
              0,   1,   0,   0,   0,
              0,   0,  -3,   0,   0,
              0,   0,   0,   3,   0,
              0,   0,   0,   0,  -1,
        ],
    },
    SrmKernel {
        name: "square3",
        divisor: 4.0,
        taps: [
              0,   0,   0,   0,   0,
              0,  -1,   2,  -1,   0,
              0,   2,  -4,   2,   0,
              0,  -1,   2,  -1,   0,
              0,   0,   0,   0,   0,
        ],
    },
    SrmKernel {
        name: "square5",
        divisor: 12.0,
        taps: [
             -1,   2,  -2,   2,  -1,
              2,  -6,   8,  -6,   2,
             -2,   8, -12,   8,  -2,
              2,  -6,   8,  -6,   2,
             -1,   2,  -2,   2,  -1,
        ],
    },
    SrmKernel {
        name: "edge3_top",
        divisor: 4.0,
        taps: [
              0,   0,   0,   0,   0,
              0,  -1,   2,  -1,   0,
              0,   2,  -4,   2,   0,
              0,   0,   0,   0,   0,
              0,   0,   0,   0,   0,
        ],
    },
    SrmKernel {
        name: "edge3_left",
        divisor: 4.0,
        taps: [
              0,   0,   0,   0,   0,
              0,  -1,   2,   0,   0,
              0,   2,  -4,   0,   0,
              0,  -1,   2,   0,   0,
              0,   0,   0,   0,   0,
        ],
    },
    SrmKernel {
        name: "edge3_bottom",
        divisor: 4.0,
        taps: [
              0,   0,   0,   0,   0,
              0,   0,   0,   0,   0,
              0,   2,  -4,   2,   0,
              0,  -1,   2,  -1,   0,
              0,   0,   0,   0,   0,
        ],
    },
    SrmKernel {
        name: "edge3_right",
        divisor: 4.0,
        taps: [
              0,   0,   0,   0,   0,
              0,   0,   2,  -1,   0,
              0,   0,  -4,   2,   0,
              0,   0,   2,  -1,   0,
              0,   0,   0,   0,   0,
        ],
    },
    SrmKernel {
        name: "edge5_top",
        divisor: 12.0,
        taps: [
             -1,   2,  -2,   2,  -1,
              2,  -6,   8,  -6,   2,
             -2,   8, -12,   8,  -2,
              0,   0,   0,   0,   0,
              0,   0,   0,   0,   0,
        ],
    },
    SrmKernel {
        name: "edge5_left",
        divisor: 12.0,
        taps: [
             -1,   2,  -2,   0,   0,
              2,  -6,   8,   0,   0,
             -2,   8, -12,   0,   0,
              2,  -6,   8,   0,   0,
             -1,   2,  -2,   0,   0,
        ],
    },
    SrmKernel {
        name: "edge5_bottom",
        divisor: 12.0,
        taps: [
              0,   0,   0,   0,   0,
              0,   0,   0,   0,   0,
             -2,   8, -12,   8,  -2,
              2,  -6,   8,  -6,   2,
             -1,   2,  -2,   2,  -1,
        ],
    },
    SrmKernel {
        name: "edge5_right",
        divisor: 12.0,
        taps: [
              0,   0,  -2,   2,  -1,
              0,   0,   8,  -6,   2,
              0,   0, -12,   8,  -2,
              0,   0,   8,  -6,   2,
              0,   0,  -2,   2,  -1,
        ],
    },
];

/// Hex SHA-256 over each kernel's taps (as bytes) followed by its divisor (f64 LE).
pub fn srm_bank_hash(bank: &[SrmKernel]) -> String {
    let mut h = Sha256::new();
    for k in bank {
        h.update(k.taps.map(|t| t as u8));
        h.update(k.divisor.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// The compiled-in bank; every kernel's integer taps are checked to sum to zero.
pub fn srm_bank() -> &'static [SrmKernel; 30] {
    static CHECKED: OnceLock<()> = OnceLock::new();
    CHECKED.get_or_init(|| {
        for k in &SRM_KERNELS {
            let s: i32 = k.taps.iter().map(|&t| t as i32).sum();
            assert_eq!(s, 0, "SRM kernel {} does not sum to zero", k.name);
        }
    });
    &SRM_KERNELS
}
