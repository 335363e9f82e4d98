//! AES-128 with T-tables whose lookups go through the simulated cache.

use serde::{Deserialize, Serialize};

use crate::addr::PhysAddr;
use crate::cache::CacheGeometry;
use crate::machine::MachineState;

fn xtime(b: u8) -> u8 {
    (b << 1) ^ if b & 0x80 != 0 { 0x1b } else { 0 }
}

fn gmul(mut a: u8, mut b: u8) -> u8 {
    let mut p = 0;
    while b != 0 {
        if b & 1 != 0 {
            p ^= a;
        }
        a = xtime(a);
        b >>= 1;
    }
    p
}

const fn build_sbox() -> [u8; 256] {
    // Walks the multiplicative group with generator 3 and its inverse
    // generator 0xf6, applying the affine map to the inverse.
    let mut sbox = [0u8; 256];
    let mut p: u8 = 1;
    let mut q: u8 = 1;
    loop {
        p = p ^ (p << 1) ^ if p & 0x80 != 0 { 0x1b } else { 0 };
        q ^= q << 1;
        q ^= q << 2;
        q ^= q << 4;
        if q & 0x80 != 0 {
            q ^= 0x09;
        }
        let x = q ^ q.rotate_left(1) ^ q.rotate_left(2) ^ q.rotate_left(3) ^ q.rotate_left(4);
        sbox[p as usize] = x ^ 0x63;
        if p == 1 {
            break;
        }
    }
    sbox[0] = 0x63;
    sbox
}

pub static SBOX: [u8; 256] = build_sbox();

const RCON: [u8; 10] = [0x01, 0x02, 0x04, 0x08, 0x10, 0x20, 0x40, 0x80, 0x1b, 0x36];

pub type Block = [u8; 16];

/// The eleven round keys of AES-128.
pub fn expand_key(key: &Block) -> [Block; 11] {
    let mut w = [[0u8; 4]; 44];
    for i in 0..4 {
        w[i].copy_from_slice(&key[4 * i..4 * i + 4]);
    }
    for i in 4..44 {
        let mut t = w[i - 1];
        if i % 4 == 0 {
            t = [SBOX[t[1] as usize] ^ RCON[i / 4 - 1], SBOX[t[2] as usize], SBOX[t[3] as usize], SBOX[t[0] as usize]];
        }
        for k in 0..4 {
            w[i][k] = w[i - 4][k] ^ t[k];
        }
    }
    let mut rk = [[0u8; 16]; 11];
    for (r, k) in rk.iter_mut().enumerate() {
        for i in 0..4 {
            k[4 * i..4 * i + 4].copy_from_slice(&w[4 * r + i]);
        }
    }
    rk
}

/// Recovers the cipher key from the last round key.
pub fn invert_key_schedule(k10: &Block) -> Block {
    let mut w = [[0u8; 4]; 44];
    for i in 0..4 {
        w[40 + i].copy_from_slice(&k10[4 * i..4 * i + 4]);
    }
    for i in (0..40).rev() {
        // w[i + 4] = w[i] ^ f(w[i + 3])
        let mut t = w[i + 3];
        if (i + 4) % 4 == 0 {
            t = [
                SBOX[t[1] as usize] ^ RCON[(i + 4) / 4 - 1],
                SBOX[t[2] as usize],
                SBOX[t[3] as usize],
                SBOX[t[0] as usize],
            ];
        }
        for k in 0..4 {
            w[i][k] = w[i + 4][k] ^ t[k];
        }
    }
    let mut key = [0u8; 16];
    for i in 0..4 {
        key[4 * i..4 * i + 4].copy_from_slice(&w[i]);
    }
    key
}

fn te0(x: u8) -> u32 {
    let s = SBOX[x as usize];
    u32::from_be_bytes([xtime(s), s, s, gmul(s, 3)])
}

/// The five 256-word tables: `Te0..Te3` for the main rounds and `Te4`
/// (the S-box replicated in each byte) for the last round.
pub fn t_tables() -> [[u32; 256]; 5] {
    let mut t = [[0u32; 256]; 5];
    for x in 0..=255u8 {
        let w = te0(x);
        t[0][x as usize] = w;
        t[1][x as usize] = w.rotate_right(8);
        t[2][x as usize] = w.rotate_right(16);
        t[3][x as usize] = w.rotate_right(24);
        t[4][x as usize] = u32::from_be_bytes([SBOX[x as usize]; 4]);
    }
    t
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AesVariant {
    /// One table word per lookup.
    #[default]
    TTable,
    /// Every last-round lookup reads one word from each line of `Te4`, so
    /// the set of touched last-round lines does not depend on the data.
    Scrambled,
}

pub const TABLE_BYTES: u32 = 1024;

/// Victim holding the tables in physical memory at `base`, table `i` at
/// `base + i * 1 KB`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AesVictim {
    pub base: PhysAddr,
    pub variant: AesVariant,
    round_keys: [Block; 11],
}

/// Default victim table base, inside hypervisor memory.
pub const VICTIM_TABLES: PhysAddr = PhysAddr(0x0008_0000);

impl AesVictim {
    pub fn new(key: &Block, base: PhysAddr, variant: AesVariant) -> Self {
        AesVictim { base, variant, round_keys: expand_key(key) }
    }

    pub fn last_round_key(&self) -> Block {
        self.round_keys[10]
    }

    /// Writes the tables to memory, bypassing the cache.
    pub fn install(&self, m: &mut MachineState) {
        for (i, table) in t_tables().iter().enumerate() {
            for (x, &w) in table.iter().enumerate() {
                m.mem.write(self.entry(i, x as u8), w);
            }
        }
    }

    fn entry(&self, table: usize, x: u8) -> PhysAddr {
        PhysAddr(self.base.0 + table as u32 * TABLE_BYTES + 4 * x as u32)
    }

    fn lookup(&self, m: &mut MachineState, table: usize, x: u8) -> u32 {
        m.cached_read(self.entry(table, x))
    }

    fn last_lookup(&self, m: &mut MachineState, x: u8) -> u32 {
        match self.variant {
            AesVariant::TTable => self.lookup(m, 4, x),
            AesVariant::Scrambled => {
                let lw = m.cache.geometry().line_words as u32;
                let mut out = 0;
                for line in 0..256 / lw {
                    let y = (line * lw + x as u32 % lw) as u8;
                    let v = self.lookup(m, 4, y);
                    if y == x {
                        out = v;
                    }
                }
                out
            }
        }
    }

    /// Encrypts one block; every table lookup is a cached read of the
    /// victim's tables.
    pub fn encrypt(&self, m: &mut MachineState, pt: &Block) -> Block {
        let rk = |r: usize, i: usize| u32::from_be_bytes(self.round_keys[r][4 * i..4 * i + 4].try_into().unwrap());
        let mut s = [0u32; 4];
        for i in 0..4 {
            s[i] = u32::from_be_bytes(pt[4 * i..4 * i + 4].try_into().unwrap()) ^ rk(0, i);
        }
        for r in 1..10 {
            let mut t = [0u32; 4];
            for i in 0..4 {
                t[i] = self.lookup(m, 0, (s[i] >> 24) as u8)
                    ^ self.lookup(m, 1, (s[(i + 1) % 4] >> 16) as u8)
                    ^ self.lookup(m, 2, (s[(i + 2) % 4] >> 8) as u8)
                    ^ self.lookup(m, 3, s[(i + 3) % 4] as u8)
                    ^ rk(r, i);
            }
            s = t;
        }
        let mut ct = [0u8; 16];
        for i in 0..4 {
            let w = (self.last_lookup(m, (s[i] >> 24) as u8) & 0xff00_0000)
                ^ (self.last_lookup(m, (s[(i + 1) % 4] >> 16) as u8) & 0x00ff_0000)
                ^ (self.last_lookup(m, (s[(i + 2) % 4] >> 8) as u8) & 0x0000_ff00)
                ^ (self.last_lookup(m, s[(i + 3) % 4] as u8) & 0x0000_00ff)
                ^ rk(10, i);
            ct[4 * i..4 * i + 4].copy_from_slice(&w.to_be_bytes());
        }
        ct
    }
}

/// One cache line of `Te4`: its set index and the S-box outputs it holds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct T4Line {
    pub set: usize,
    pub values: Vec<u8>,
}

/// Where the last-round table sits in the cache.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct T4Layout {
    pub lines: Vec<T4Line>,
}

impl T4Layout {
    pub fn of(base: PhysAddr, g: &CacheGeometry) -> Self {
        let t4 = base.0 + 4 * TABLE_BYTES;
        let lw = g.line_words;
        let lines = (0..256 / lw)
            .map(|l| {
                let pa = PhysAddr(t4 + (l * lw * 4) as u32);
                T4Line {
                    set: g.set_index(crate::addr::VirtAddr(pa.0), pa),
                    values: (l * lw..(l + 1) * lw).map(|x| SBOX[x]).collect(),
                }
            })
            .collect();
        T4Layout { lines }
    }

    pub fn sets(&self) -> impl Iterator<Item = usize> + '_ {
        self.lines.iter().map(|l| l.set)
    }
}
