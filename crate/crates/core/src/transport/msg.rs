//! Message type codes. One ciphertext or one logical payload per frame.

pub const HELLO: u16 = 0x01;
pub const PUBLIC_KEY: u16 = 0x02;
pub const ABORT: u16 = 0x03;

pub const FWD_INPUT_CT: u16 = 0x10;
pub const FWD_MASKED_CT: u16 = 0x11;
pub const BWD_INPUT_CT: u16 = 0x20;
pub const BWD_MASKED_CT: u16 = 0x21;
pub const GRADW_INPUT_CT: u16 = 0x30;
pub const GRADB_REVEAL: u16 = 0x31;
pub const GRADW_MASKED_CT: u16 = 0x32;
pub const GRADW_REVEAL: u16 = 0x33;

pub const PREP_INPUT_CT: u16 = 0x40;
pub const PREP_MASKED_CT: u16 = 0x41;
pub const ONLINE_MO_MASKED: u16 = 0x48;
pub const ONLINE_DO_MASKED: u16 = 0x49;

pub const OT_BASE_SETUP: u16 = 0x50;
pub const OT_BASE_REPLY: u16 = 0x51;
pub const OT_CHOICE: u16 = 0x52;
pub const OT_MESSAGES: u16 = 0x53;

pub const NL_SHARES: u16 = 0x60;

pub const OUTPUT_REVEAL: u16 = 0x70;
pub const CONTROL: u16 = 0x7F;

/// Frames whose payload is a BFV ciphertext.
pub fn is_ciphertext(kind: u16) -> bool {
    matches!(
        kind,
        FWD_INPUT_CT
            | FWD_MASKED_CT
            | BWD_INPUT_CT
            | BWD_MASKED_CT
            | GRADW_INPUT_CT
            | GRADW_MASKED_CT
            | PREP_INPUT_CT
            | PREP_MASKED_CT
    )
}

pub fn name(kind: u16) -> &'static str {
    match kind {
        HELLO => "hello",
        PUBLIC_KEY => "public-key",
        ABORT => "abort",
        FWD_INPUT_CT => "forward-input-ct",
        FWD_MASKED_CT => "forward-masked-ct",
        BWD_INPUT_CT => "backward-input-ct",
        BWD_MASKED_CT => "backward-masked-ct",
        GRADW_INPUT_CT => "weight-grad-input-ct",
        GRADB_REVEAL => "bias-grad-reveal",
        GRADW_MASKED_CT => "weight-grad-masked-ct",
        GRADW_REVEAL => "weight-grad-reveal",
        PREP_INPUT_CT => "prep-input-ct",
        PREP_MASKED_CT => "prep-masked-ct",
        ONLINE_MO_MASKED => "online-mo-masked",
        ONLINE_DO_MASKED => "online-do-masked",
        OT_BASE_SETUP => "ot-base-setup",
        OT_BASE_REPLY => "ot-base-reply",
        OT_CHOICE => "ot-choice",
        OT_MESSAGES => "ot-messages",
        NL_SHARES => "nonlinear-shares",
        OUTPUT_REVEAL => "output-reveal",
        CONTROL => "control",
        _ => "unknown",
    }
}
