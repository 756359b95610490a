#pragma once

namespace pixeldino {

// Keeps freed tensor buffers in the heap instead of returning them to the OS,
// so a training loop does not page-fault its activations back in every
// step. Process-wide; a no-op outside glibc. Call once before training.
void retain_heap_for_training();

}  // namespace pixeldino
