//! Register map. Offsets are byte offsets into the MMIO window.

pub const RB_BASE: u32 = 0x000;
pub const RB_SIZE: u32 = 0x004;
pub const RB_HEAD: u32 = 0x008;
pub const RB_TAIL: u32 = 0x00C;
pub const FB_BASE: u32 = 0x010;
pub const IH_PAGE_ADDR: u32 = 0x014;
pub const CACHE_FLUSH: u32 = 0x018;
pub const TLB_FLUSH: u32 = 0x01C;
pub const SCRATCH0: u32 = 0x020;
pub const SCRATCH7: u32 = 0x03C;

pub const MC_SEG_BASE: u32 = 0x100;
pub const MC_SEG_LIMIT: u32 = 0x104;
pub const IOMMU_ROOT: u32 = 0x108;
pub const IOMMU_ENABLE: u32 = 0x10C;
pub const CP_RESET: u32 = 0x120;
pub const IRQ_ENABLE: u32 = 0x124;

pub const DISP_PLL: u32 = 0x200;
pub const DISP_TIMING_H: u32 = 0x204;
pub const DISP_TIMING_V: u32 = 0x208;
pub const DISP_ENABLE: u32 = 0x20C;

pub const FW_ADDR: u32 = 0x300;
pub const FW_DATA: u32 = 0x304;
pub const FW_CTRL: u32 = 0x308;

/// FW_CTRL: write to start verification of the loaded image.
pub const FW_CMD_LOAD: u32 = 1;
/// FW_CTRL read-back values.
pub const FW_STATE_IDLE: u32 = 0;
pub const FW_STATE_READY: u32 = 2;
pub const FW_STATE_BAD: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegClass {
    /// Management register a library may be authorized to use.
    Management,
    /// Sensitive register reachable only by the core.
    Sensitive,
}

#[derive(Debug, Clone, Copy)]
pub struct RegInfo {
    pub offset: u32,
    pub name: &'static str,
    pub class: RegClass,
}

const fn m(offset: u32, name: &'static str) -> RegInfo {
    RegInfo {
        offset,
        name,
        class: RegClass::Management,
    }
}

const fn s(offset: u32, name: &'static str) -> RegInfo {
    RegInfo {
        offset,
        name,
        class: RegClass::Sensitive,
    }
}

/// Every register, sorted by offset.
pub const REGISTER_MAP: [RegInfo; 29] = [
    m(RB_BASE, "RB_BASE"),
    m(RB_SIZE, "RB_SIZE"),
    m(RB_HEAD, "RB_HEAD"),
    m(RB_TAIL, "RB_TAIL"),
    m(FB_BASE, "FB_BASE"),
    m(IH_PAGE_ADDR, "IH_PAGE_ADDR"),
    m(CACHE_FLUSH, "CACHE_FLUSH"),
    m(TLB_FLUSH, "TLB_FLUSH"),
    m(0x020, "SCRATCH0"),
    m(0x024, "SCRATCH1"),
    m(0x028, "SCRATCH2"),
    m(0x02C, "SCRATCH3"),
    m(0x030, "SCRATCH4"),
    m(0x034, "SCRATCH5"),
    m(0x038, "SCRATCH6"),
    m(0x03C, "SCRATCH7"),
    s(MC_SEG_BASE, "MC_SEG_BASE"),
    s(MC_SEG_LIMIT, "MC_SEG_LIMIT"),
    s(IOMMU_ROOT, "IOMMU_ROOT"),
    s(IOMMU_ENABLE, "IOMMU_ENABLE"),
    s(CP_RESET, "CP_RESET"),
    s(IRQ_ENABLE, "IRQ_ENABLE"),
    s(DISP_PLL, "DISP_PLL"),
    s(DISP_TIMING_H, "DISP_TIMING_H"),
    s(DISP_TIMING_V, "DISP_TIMING_V"),
    s(DISP_ENABLE, "DISP_ENABLE"),
    s(FW_ADDR, "FW_ADDR"),
    s(FW_DATA, "FW_DATA"),
    s(FW_CTRL, "FW_CTRL"),
];

pub fn index_of(offset: u32) -> Option<usize> {
    REGISTER_MAP.binary_search_by_key(&offset, |r| r.offset).ok()
}

pub fn info(offset: u32) -> Option<&'static RegInfo> {
    index_of(offset).map(|i| &REGISTER_MAP[i])
}

pub fn is_scratch(offset: u32) -> bool {
    (SCRATCH0..=SCRATCH7).contains(&offset) && offset % 4 == 0
}

pub fn management_offsets() -> impl Iterator<Item = u32> {
    REGISTER_MAP
        .iter()
        .filter(|r| r.class == RegClass::Management)
        .map(|r| r.offset)
}

pub fn sensitive_offsets() -> impl Iterator<Item = u32> {
    REGISTER_MAP
        .iter()
        .filter(|r| r.class == RegClass::Sensitive)
        .map(|r| r.offset)
}
