#include "remem/kernels.hpp"

#include <algorithm>

namespace remem::kernels {

namespace {
int g_max_threads = 1;
}

int max_threads() { return g_max_threads; }

void set_max_threads(int n) { g_max_threads = std::clamp(n, 1, 256); }

}  // namespace remem::kernels
