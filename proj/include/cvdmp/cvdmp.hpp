#pragma once

#include "cvdmp/error.hpp"
#include "cvdmp/io.hpp"
#include "cvdmp/dmp.hpp"
#include "cvdmp/dataset.hpp"
#include "cvdmp/nn/tensor.hpp"
#include "cvdmp/nn/network.hpp"
#include "cvdmp/nn/latent.hpp"
#include "cvdmp/nn/optim.hpp"
#include "cvdmp/cvae.hpp"
#include "cvdmp/metrics.hpp"
#include "cvdmp/generator.hpp"
#include "cvdmp/sim2d.hpp"
#include "cvdmp/evaluation.hpp"
#include "cvdmp/svg.hpp"
