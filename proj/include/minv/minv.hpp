#pragma once

#include "minv/attention.hpp"
#include "minv/autograd.hpp"
#include "minv/denoiser.hpp"
#include "minv/diffusion.hpp"
#include "minv/embeddings.hpp"
#include "minv/error.hpp"
#include "minv/inversion.hpp"
#include "minv/metrics.hpp"
#include "minv/model_spec.hpp"
#include "minv/synthdata.hpp"
#include "minv/tensor.hpp"
