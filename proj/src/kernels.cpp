#include "mdsq/kernels.hpp"

#include <atomic>
#include <cstdlib>
#include <string_view>

namespace mdsq::kernels {

const KernelSet* avx2_kernels()
{
#if defined(MDSQ_HAVE_AVX2_TU) && (defined(__GNUC__) || defined(__clang__))
    static const bool supported = __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
    return supported ? detail::avx2_kernels_if_compiled() : nullptr;
#else
    return nullptr;
#endif
}

namespace {

const KernelSet* pick_default()
{
    const char* env = std::getenv("MDSQ_KERNELS");
    if (env != nullptr && std::string_view(env) == "scalar")
        return &scalar_kernels();
    if (const KernelSet* fast = avx2_kernels())
        return fast;
    return &scalar_kernels();
}

std::atomic<const KernelSet*>& slot()
{
    static std::atomic<const KernelSet*> current{pick_default()};
    return current;
}

} // namespace

const KernelSet& active()
{
    return *slot().load(std::memory_order_relaxed);
}

void set_active(const KernelSet& set)
{
    slot().store(&set, std::memory_order_relaxed);
}

} // namespace mdsq::kernels
