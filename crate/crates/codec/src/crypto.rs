//! LoRaWAN 1.0.x cryptography: MIC computation, FRMPayload encryption,
//! OTAA session-key derivation and join-accept encryption.
//!
//! The block cipher and CMAC come from the RustCrypto crates; the block
//! layouts on top of them are built here.

use aes::cipher::{BlockDecrypt, BlockEncrypt, KeyInit};
use aes::Aes128;
use cmac::{Cmac, Mac};

use crate::types::{AesKey, DevAddr, Direction, SessionKeys};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CryptoError {
    #[error("join accept must be 16 or 32 bytes, got {0}")]
    BadLength(usize),
}

pub type Mic = [u8; 4];

fn aes_encrypt_block(key: &AesKey, block: &mut [u8; 16]) {
    let cipher = Aes128::new(key.as_bytes().into());
    cipher.encrypt_block(block.into());
}

fn aes_decrypt_block(key: &AesKey, block: &mut [u8; 16]) {
    let cipher = Aes128::new(key.as_bytes().into());
    cipher.decrypt_block(block.into());
}

fn cmac4(key: &AesKey, parts: &[&[u8]]) -> Mic {
    let mut mac = <Cmac<Aes128> as KeyInit>::new(key.as_bytes().into());
    for p in parts {
        mac.update(p);
    }
    let full = mac.finalize().into_bytes();
    [full[0], full[1], full[2], full[3]]
}

/// The 16-byte block shared by B0 (MIC) and A_i (encryption): tag, four
/// zero bytes, direction, DevAddr, 32-bit FCnt, a zero, then `last`.
fn counter_block(tag: u8, dir: Direction, dev_addr: DevAddr, fcnt32: u32, last: u8) -> [u8; 16] {
    let mut b = [0u8; 16];
    b[0] = tag;
    b[5] = dir.as_byte();
    b[6..10].copy_from_slice(&dev_addr.to_le_bytes());
    b[10..14].copy_from_slice(&fcnt32.to_le_bytes());
    b[15] = last;
    b
}

/// MIC of a data frame. `msg` is MHDR through FRMPayload (everything but
/// the trailing MIC). The full 32-bit counter enters the B0 prefix block.
pub fn mic_data(msg: &[u8], key: &AesKey, dir: Direction, dev_addr: DevAddr, fcnt32: u32) -> Mic {
    // The length byte of B0 is the message length modulo 256; frames never
    // reach that size.
    let b0 = counter_block(0x49, dir, dev_addr, fcnt32, msg.len() as u8);
    cmac4(key, &[&b0, msg])
}

/// MIC of a join request or (plaintext) join accept: CMAC over the raw
/// frame bytes with no prefix block.
pub fn mic_join(msg: &[u8], key: &AesKey) -> Mic {
    cmac4(key, &[msg])
}

/// Counter-mode keystream XOR of an FRMPayload. Self-inverse for fixed
/// parameters.
pub fn crypt_frm(payload: &[u8], key: &AesKey, dev_addr: DevAddr, fcnt32: u32, dir: Direction) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.len());
    for (i, chunk) in payload.chunks(16).enumerate() {
        let mut s = counter_block(0x01, dir, dev_addr, fcnt32, (i + 1) as u8);
        aes_encrypt_block(key, &mut s);
        out.extend(chunk.iter().zip(s.iter()).map(|(p, k)| p ^ k));
    }
    out
}

/// NwkSKey = aes(AppKey, 0x01 | AppNonce | NetID | DevNonce | pad),
/// AppSKey the same with 0x02.
pub fn derive_session_keys(app_key: &AesKey, app_nonce: u32, net_id: u32, dev_nonce: u16) -> SessionKeys {
    let mut block = [0u8; 16];
    block[1..4].copy_from_slice(&app_nonce.to_le_bytes()[..3]);
    block[4..7].copy_from_slice(&net_id.to_le_bytes()[..3]);
    block[7..9].copy_from_slice(&dev_nonce.to_le_bytes());

    let mut nwk = block;
    nwk[0] = 0x01;
    aes_encrypt_block(app_key, &mut nwk);

    let mut app = block;
    app[0] = 0x02;
    aes_encrypt_block(app_key, &mut app);

    SessionKeys {
        nwk_skey: AesKey(nwk),
        app_skey: AesKey(app),
    }
}

fn check_accept_len(len: usize) -> Result<(), CryptoError> {
    if len == 16 || len == 32 {
        Ok(())
    } else {
        Err(CryptoError::BadLength(len))
    }
}

/// Network-side join-accept encryption of body+MIC (everything after the
/// MHDR). The network applies the block *decrypt* operation so that the
/// device only needs the encrypt direction.
pub fn encrypt_join_accept(plain: &[u8], app_key: &AesKey) -> Result<Vec<u8>, CryptoError> {
    check_accept_len(plain.len())?;
    let mut out = plain.to_vec();
    for chunk in out.chunks_mut(16) {
        let block: &mut [u8; 16] = chunk.try_into().expect("16-byte chunk");
        aes_decrypt_block(app_key, block);
    }
    Ok(out)
}

/// Device-side inverse of [`encrypt_join_accept`].
pub fn decrypt_join_accept(cipher: &[u8], app_key: &AesKey) -> Result<Vec<u8>, CryptoError> {
    check_accept_len(cipher.len())?;
    let mut out = cipher.to_vec();
    for chunk in out.chunks_mut(16) {
        let block: &mut [u8; 16] = chunk.try_into().expect("16-byte chunk");
        aes_encrypt_block(app_key, block);
    }
    Ok(out)
}
