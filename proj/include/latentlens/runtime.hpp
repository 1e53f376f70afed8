#pragma once

namespace latentlens {

/// Keeps large scratch allocations on the heap instead of fresh mmaps, which
/// otherwise dominate training time through page faults. Call once at startup.
void tune_allocator();

}  // namespace latentlens
