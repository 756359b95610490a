#include "pixeldino/runtime.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace pixeldino {

void retain_heap_for_training() {
#if defined(__GLIBC__)
  constexpr int kOneGiB = 1 << 30;
  mallopt(M_MMAP_THRESHOLD, kOneGiB);
  mallopt(M_TRIM_THRESHOLD, kOneGiB);
#endif
}

}  // namespace pixeldino
