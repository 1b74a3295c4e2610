//! Straight-line BLAKE3 (hash mode, 32-byte output) used as an oracle.
//! Recursive tree form; written for clarity, not speed.

const IV: [u32; 8] = [
    0x6A09E667, 0xBB67AE85, 0x3C6EF372, 0xA54FF53A, 0x510E527F, 0x9B05688C, 0x1F83D9AB, 0x5BE0CD19,
];
const PERMUTATION: [usize; 16] = [2, 6, 3, 10, 7, 0, 4, 13, 1, 11, 12, 5, 9, 14, 15, 8];
const CHUNK_LEN: usize = 1024;
const BLOCK_LEN: usize = 64;
const CHUNK_START: u32 = 1;
const CHUNK_END: u32 = 2;
const PARENT: u32 = 4;
const ROOT: u32 = 8;

fn g(s: &mut [u32; 16], a: usize, b: usize, c: usize, d: usize, x: u32, y: u32) {
    s[a] = s[a].wrapping_add(s[b]).wrapping_add(x);
    s[d] = (s[d] ^ s[a]).rotate_right(16);
    s[c] = s[c].wrapping_add(s[d]);
    s[b] = (s[b] ^ s[c]).rotate_right(12);
    s[a] = s[a].wrapping_add(s[b]).wrapping_add(y);
    s[d] = (s[d] ^ s[a]).rotate_right(8);
    s[c] = s[c].wrapping_add(s[d]);
    s[b] = (s[b] ^ s[c]).rotate_right(7);
}

fn compress(cv: &[u32; 8], block: &[u32; 16], counter: u64, len: u32, flags: u32) -> [u32; 16] {
    let mut s = [
        cv[0], cv[1], cv[2], cv[3], cv[4], cv[5], cv[6], cv[7],
        IV[0], IV[1], IV[2], IV[3],
        counter as u32, (counter >> 32) as u32, len, flags,
    ];
    let mut m = *block;
    for round in 0..7 {
        g(&mut s, 0, 4, 8, 12, m[0], m[1]);
        g(&mut s, 1, 5, 9, 13, m[2], m[3]);
        g(&mut s, 2, 6, 10, 14, m[4], m[5]);
        g(&mut s, 3, 7, 11, 15, m[6], m[7]);
        g(&mut s, 0, 5, 10, 15, m[8], m[9]);
        g(&mut s, 1, 6, 11, 12, m[10], m[11]);
        g(&mut s, 2, 7, 8, 13, m[12], m[13]);
        g(&mut s, 3, 4, 9, 14, m[14], m[15]);
        if round < 6 {
            m = std::array::from_fn(|i| m[PERMUTATION[i]]);
        }
    }
    for i in 0..8 {
        s[i] ^= s[i + 8];
        s[i + 8] ^= cv[i];
    }
    s
}

fn words(block: &[u8]) -> [u32; 16] {
    let mut padded = [0u8; BLOCK_LEN];
    padded[..block.len()].copy_from_slice(block);
    std::array::from_fn(|i| u32::from_le_bytes(padded[4 * i..4 * i + 4].try_into().unwrap()))
}

/// Inputs to the final compression of a node, before the root flag is known.
struct Node {
    cv: [u32; 8],
    block: [u32; 16],
    counter: u64,
    len: u32,
    flags: u32,
}

impl Node {
    fn chaining_value(&self) -> [u32; 8] {
        let out = compress(&self.cv, &self.block, self.counter, self.len, self.flags);
        std::array::from_fn(|i| out[i])
    }

    fn root_hash(&self) -> [u8; 32] {
        let out = compress(&self.cv, &self.block, 0, self.len, self.flags | ROOT);
        let mut h = [0u8; 32];
        for i in 0..8 {
            h[4 * i..4 * i + 4].copy_from_slice(&out[i].to_le_bytes());
        }
        h
    }
}

fn chunk_node(chunk: &[u8], counter: u64) -> Node {
    let blocks: Vec<&[u8]> = if chunk.is_empty() {
        vec![&[][..]]
    } else {
        chunk.chunks(BLOCK_LEN).collect()
    };
    let mut cv = IV;
    let last = blocks.len() - 1;
    for (i, b) in blocks[..last].iter().enumerate() {
        let flags = if i == 0 { CHUNK_START } else { 0 };
        let out = compress(&cv, &words(b), counter, BLOCK_LEN as u32, flags);
        cv = std::array::from_fn(|j| out[j]);
    }
    let start = if last == 0 { CHUNK_START } else { 0 };
    Node {
        cv,
        block: words(blocks[last]),
        counter,
        len: blocks[last].len() as u32,
        flags: start | CHUNK_END,
    }
}

fn node(input: &[u8], counter: u64) -> Node {
    if input.len() <= CHUNK_LEN {
        return chunk_node(input, counter);
    }
    // Left subtree takes the largest power-of-two number of whole chunks
    // that leaves at least one byte for the right.
    let chunks = input.len().div_ceil(CHUNK_LEN);
    let left_chunks = 1usize << (usize::BITS - 1 - (chunks - 1).leading_zeros());
    let split = left_chunks * CHUNK_LEN;
    let l = node(&input[..split], counter).chaining_value();
    let r = node(&input[split..], counter + left_chunks as u64).chaining_value();
    let mut block = [0u32; 16];
    block[..8].copy_from_slice(&l);
    block[8..].copy_from_slice(&r);
    Node {
        cv: IV,
        block,
        counter: 0,
        len: BLOCK_LEN as u32,
        flags: PARENT,
    }
}

pub fn hash(input: &[u8]) -> [u8; 32] {
    node(input, 0).root_hash()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
