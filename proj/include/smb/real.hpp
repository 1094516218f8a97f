#pragma once

// Element type of the numerics and model code. The library is built in f32;
// gradient checking builds a second f64 instance of the same sources, kept
// apart by the inline namespace so both can link into one binary.

#if defined(SMB_REAL_DOUBLE)
#define SMB_PRECISION f64
#else
#define SMB_PRECISION f32
#endif

namespace smb::inline SMB_PRECISION {

#if defined(SMB_REAL_DOUBLE)
using real = double;
#else
using real = float;
#endif

} // namespace smb::inline SMB_PRECISION
