#pragma once

// Training/evaluation degradation: antialiased bicubic downscale by the task
// factor, then JPEG compression at the given quality. Scale 1 skips the
// resize (pure artifact-removal setting).

#include "s2sr/bicubic.hpp"
#include "s2sr/jpeg.hpp"

namespace s2sr {

inline ImageU8 degrade(const ImageU8& hr, int64_t scale, int quality) {
  if (scale < 1 || scale > 4) throw UsageError("degrade scale must be in {1,2,3,4}");
  if (hr.height % scale != 0 || hr.width % scale != 0)
    throw UsageError("degrade needs dimensions divisible by the scale; crop first");
  ImageU8 lr = scale == 1
                   ? hr
                   : bicubic_resize(hr, hr.height / scale, hr.width / scale, /*antialias=*/true);
  return jpeg_decode(jpeg_encode(lr, quality));
}

}  // namespace s2sr
