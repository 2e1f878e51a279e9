DIFF = 'diff'
FISHER = 'fisher'
SH = 'sh'
GS_ALPHA = 'gs-alpha'
GS_BETA = 'gs-beta'
GS_GAMMA = 'gs-gamma'
GS_DELTA = 'gs-delta'
GS_EPSILON = 'gs-epsilon'
GS_THETA = 'gs-theta'
GS_IOTA = 'gs-iota'
GS_KAPPA = 'gs-kappa'
BURGERS = 'burgers'
KDV = 'kdv'
KS = 'ks'
DECAY_TURB = 'decay-turb'
KOLM_FLOW = 'kolm-flow'

GRAY_SCOTT = (GS_ALPHA, GS_BETA, GS_GAMMA, GS_DELTA, GS_EPSILON, GS_THETA, GS_IOTA, GS_KAPPA,)
VORTICITY = (DECAY_TURB, KOLM_FLOW,)

ALL = (DIFF, FISHER, SH, GS_ALPHA, GS_BETA, GS_GAMMA, GS_DELTA, GS_EPSILON, GS_THETA, GS_IOTA, GS_KAPPA,
       BURGERS, KDV, KS, DECAY_TURB, KOLM_FLOW,)


def class_id(pde_kind: str) -> int:
    return ALL.index(pde_kind)
